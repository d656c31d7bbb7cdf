"""Binary container for keys and ciphertexts.

Layout: magic "HCNK", format version u16, 32-byte digest of the parameter
set, a kind tag, then little-endian u64 residue payloads in limb-major
order. Loading refuses on magic/version/kind/digest mismatch so material
never silently crosses parameter sets. Writes go through a temp file and
rename, so readers only ever see complete containers.
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import BinaryIO

import numpy as np

from .ckks import Ciphertext, CkksParams, KeySet, SwitchKey
from .errors import SerializationError
from .ring import Domain, RnsPoly

MAGIC = b"HCNK"
VERSION = 1

KIND_CIPHERTEXT = "ciphertext"
KIND_KEYSET = "keyset"
KIND_PACKED = "packed-tensor"


def _write_u16(f: BinaryIO, v: int):
    f.write(struct.pack("<H", v))


def _write_u32(f: BinaryIO, v: int):
    f.write(struct.pack("<I", v))


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise SerializationError("container truncated")
    return data


def _read_u16(f: BinaryIO) -> int:
    return struct.unpack("<H", _read_exact(f, 2))[0]


def _read_u32(f: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(f, 4))[0]


def _write_array(f: BinaryIO, arr: np.ndarray):
    if arr.dtype != np.uint64 or arr.ndim != 2:
        raise SerializationError("payload arrays must be 2-D uint64")
    _write_u32(f, arr.shape[0])
    _write_u32(f, arr.shape[1])
    f.write(np.ascontiguousarray(arr).astype("<u8", copy=False).tobytes())


def _read_array(f: BinaryIO) -> np.ndarray:
    rows = _read_u32(f)
    cols = _read_u32(f)
    raw = _read_exact(f, rows * cols * 8)
    return np.frombuffer(raw, dtype="<u8").astype(np.uint64).reshape(rows, cols)


def _write_poly(f: BinaryIO, p: RnsPoly, params: CkksParams):
    n_q = sum(1 for m in p.mods if m in params.q_mods)
    n_p = len(p.mods) - n_q
    if p.mods != params.q_mods[:n_q] + params.p_mods[:n_p]:
        raise SerializationError("polynomial basis is not a chain prefix")
    _write_u32(f, n_q)
    _write_u32(f, n_p)
    f.write(struct.pack("<B", 1 if p.domain is Domain.EVAL else 0))
    _write_array(f, p.coeffs)


def _read_poly(f: BinaryIO, params: CkksParams) -> RnsPoly:
    n_q = _read_u32(f)
    n_p = _read_u32(f)
    dom = Domain.EVAL if _read_exact(f, 1)[0] else Domain.COEFF
    mods = params.q_mods[:n_q] + params.p_mods[:n_p]
    coeffs = _read_array(f)
    if coeffs.shape != (len(mods), params.n):
        raise SerializationError("payload shape disagrees with parameters")
    return RnsPoly(mods, coeffs, dom)


def _write_header(f: BinaryIO, kind: str, params: CkksParams):
    f.write(MAGIC)
    _write_u16(f, VERSION)
    f.write(bytes.fromhex(params.digest()))
    kb = kind.encode()
    _write_u16(f, len(kb))
    f.write(kb)


def _read_header(f: BinaryIO, kind: str, params: CkksParams):
    if _read_exact(f, 4) != MAGIC:
        raise SerializationError("not an HCNK container")
    ver = _read_u16(f)
    if ver != VERSION:
        raise SerializationError(f"unsupported container version {ver}")
    digest = _read_exact(f, 32)
    if digest != bytes.fromhex(params.digest()):
        raise SerializationError(
            "params digest mismatch: container was written under a different "
            "parameter set"
        )
    got_kind = _read_exact(f, _read_u16(f)).decode()
    if got_kind != kind:
        raise SerializationError(f"expected {kind} container, found {got_kind}")


def _atomic_open(path: str):
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".hcnk-")
    return fd, tmp


def _atomic_write(path: str, writer):
    fd, tmp = _atomic_open(path)
    try:
        with os.fdopen(fd, "wb") as f:
            writer(f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# ciphertexts
# ---------------------------------------------------------------------------

def save_ciphertext(path: str, ct: Ciphertext, params: CkksParams):
    def writer(f):
        _write_header(f, KIND_CIPHERTEXT, params)
        f.write(struct.pack("<d", ct.scale))
        _write_poly(f, ct.c0, params)
        _write_poly(f, ct.c1, params)

    _atomic_write(path, writer)


def load_ciphertext(path: str, params: CkksParams) -> Ciphertext:
    with open(path, "rb") as f:
        _read_header(f, KIND_CIPHERTEXT, params)
        (scale,) = struct.unpack("<d", _read_exact(f, 8))
        c0 = _read_poly(f, params)
        c1 = _read_poly(f, params)
    return Ciphertext(c0=c0, c1=c1, scale=scale, n=params.n)


# ---------------------------------------------------------------------------
# packed tensors
# ---------------------------------------------------------------------------

def save_packed_tensor(path: str, x, params: CkksParams):
    """Packed tensor: format descriptor, logical shape, then ciphertexts."""

    def writer(f):
        _write_header(f, KIND_PACKED, params)
        f.write(x.fmt.variant.encode())
        for v in (x.fmt.multiplex, x.fmt.gap, x.fmt.span,
                  x.shape.c, x.shape.h, x.shape.w, len(x.cts)):
            _write_u32(f, v)
        for ct in x.cts:
            f.write(struct.pack("<d", ct.scale))
            _write_poly(f, ct.c0, params)
            _write_poly(f, ct.c1, params)

    _atomic_write(path, writer)


def load_packed_tensor(path: str, params: CkksParams):
    from .packing import PackedTensor, PackingFormat, TensorShape

    with open(path, "rb") as f:
        _read_header(f, KIND_PACKED, params)
        variant = _read_exact(f, 1).decode()
        m, gap, span, c, h, w, n_cts = (_read_u32(f) for _ in range(7))
        cts = []
        for _ in range(n_cts):
            (scale,) = struct.unpack("<d", _read_exact(f, 8))
            c0 = _read_poly(f, params)
            c1 = _read_poly(f, params)
            cts.append(Ciphertext(c0=c0, c1=c1, scale=scale, n=params.n))
    return PackedTensor(cts=cts, fmt=PackingFormat(variant, m, gap, span),
                        shape=TensorShape(c, h, w))


# ---------------------------------------------------------------------------
# key sets
# ---------------------------------------------------------------------------

def _write_switch_key(f: BinaryIO, key: SwitchKey):
    _write_u32(f, len(key.rows_b))
    for b, a in zip(key.rows_b, key.rows_a):
        _write_array(f, b)
        _write_array(f, a)


def _read_switch_key(f: BinaryIO) -> SwitchKey:
    n_dig = _read_u32(f)
    rows_b, rows_a = [], []
    for _ in range(n_dig):
        rows_b.append(_read_array(f))
        rows_a.append(_read_array(f))
    return SwitchKey(rows_b=rows_b, rows_a=rows_a)


def save_keyset(path: str, ks: KeySet):
    """Persist the whole key set, secret key included.

    Desk-scale tooling keeps sk alongside the evaluation keys so decrypt
    and the test-mode refresh work from one file; a deployment split is
    out of scope here.
    """

    def writer(f):
        _write_header(f, KIND_KEYSET, ks.params)
        _write_poly(f, ks.sk, ks.params)
        _write_poly(f, ks.pk[0], ks.params)
        _write_poly(f, ks.pk[1], ks.params)
        _write_switch_key(f, ks.rlk)
        _write_u32(f, len(ks.gks))
        for step in sorted(ks.gks):
            _write_u32(f, step)
            _write_switch_key(f, ks.gks[step])

    _atomic_write(path, writer)


def load_keyset(path: str, params: CkksParams) -> KeySet:
    with open(path, "rb") as f:
        _read_header(f, KIND_KEYSET, params)
        sk = _read_poly(f, params)
        pk_b = _read_poly(f, params)
        pk_a = _read_poly(f, params)
        rlk = _read_switch_key(f)
        gks = {}
        for _ in range(_read_u32(f)):
            step = _read_u32(f)
            gks[step] = _read_switch_key(f)
    return KeySet(params=params, sk=sk, pk=(pk_b, pk_a), rlk=rlk, gks=gks)
