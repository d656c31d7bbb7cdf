"""Tensor-to-slot layouts and format-alternating convolution.

Two layouts share one addressing scheme: slot(rho, b, y, x) = rho*m*span +
b*span + y*gy + x*gx, where m is the channel multiplex, span the slots per
channel block, gy = span/h and gx = gap. The whole slot vector is filled
with r = slots/(m*span) replicas.

FormatA (channel-major): every replica holds the same image; channel c sits
at block c mod m. FormatB (channel-interleaved): replica rho holds channel
(b + rho) mod m at block b, so consecutive replicas see the channels
rotated by one block.

The stagger is what makes convolution cheap in both directions. Into B,
one block-granular rotation per source offset delivers a full column of
the weight matrix to every output channel at once. Out of B, the channel
sum is a mask followed by a log2(r) rotate-add collapse over replicas,
which lands aligned copies, i.e. FormatA, for free. Either way a layer
spends kernel-tap rotations plus O(m) or O(log r) structural rotations
instead of the O(9m) a fixed layout forces.

Every convolution consumes exactly two multiplicative levels: the weight
masks, then a format mask that confines the result to the designated
lattice and retargets the scale.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import ckks
from .ckks import Ciphertext, CkksParams, KeySet, mask_scale_for
from .errors import LevelError, PackingError, ParameterError
from .ring import Domain, to_mont_rows, zero_poly

FORMAT_A = "A"
FORMAT_B = "B"


# ---------------------------------------------------------------------------
# shapes, formats, tallies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TensorShape:
    c: int
    h: int
    w: int

    def __post_init__(self):
        if min(self.c, self.h, self.w) < 1:
            raise ParameterError("tensor dimensions must be >= 1")


@dataclass(frozen=True)
class PackingFormat:
    """Slot layout descriptor.

    span is the per-block slot count fixed when the network is packed; gap
    doubles after each strided downsampling while the data stays in place.
    """

    variant: str
    multiplex: int
    gap: int
    span: int

    def __post_init__(self):
        if self.variant not in (FORMAT_A, FORMAT_B):
            raise ParameterError(f"unknown format variant {self.variant!r}")
        for v in (self.multiplex, self.gap, self.span):
            if v < 1 or v & (v - 1):
                raise ParameterError("multiplex, gap and span must be powers of two")

    def downsampled(self) -> "PackingFormat":
        return replace(self, gap=self.gap * 2)


@dataclass
class OpTally:
    """Homomorphic-operation counts, the artifact's cost proxy."""

    rotations: int = 0
    hmults: int = 0
    pmults: int = 0
    hadds: int = 0
    rescales: int = 0
    refreshes: int = 0

    def __iadd__(self, other: "OpTally") -> "OpTally":
        self.rotations += other.rotations
        self.hmults += other.hmults
        self.pmults += other.pmults
        self.hadds += other.hadds
        self.rescales += other.rescales
        self.refreshes += other.refreshes
        return self

    def total(self) -> int:
        return (self.rotations + self.hmults + self.pmults + self.hadds
                + self.rescales + self.refreshes)

    def as_dict(self) -> dict:
        return {
            "rotations": self.rotations,
            "hmults": self.hmults,
            "pmults": self.pmults,
            "hadds": self.hadds,
            "rescales": self.rescales,
            "refreshes": self.refreshes,
        }


@dataclass
class PackedTensor:
    cts: list[Ciphertext]
    fmt: PackingFormat
    shape: TensorShape

    @property
    def level(self) -> int:
        return self.cts[0].level

    @property
    def scale(self) -> float:
        return self.cts[0].scale


@dataclass
class ConvLayerSpec:
    """3x3/1x1 convolution with optional absorbed activation scalars.

    pre_scale multiplies input channel i (the quadratic coefficient folded
    from the previous activation); bias_map, when given, replaces the
    per-channel bias with an explicit per-pixel map (needed because the
    absorbed constant term sees fewer kernel taps at the borders).

    low_scale_out targets delta^0.75 instead of delta on the output so a
    following self-contained quadratic activation keeps a healthy mask
    scale: its mask lands at q * delta / s^2, which degenerates to ~1
    when s is the full delta.
    """

    weights: np.ndarray              # [out_c][in_c][kh][kw]
    stride: int
    in_format: PackingFormat
    out_format: PackingFormat
    bias: np.ndarray | None = None
    pre_scale: np.ndarray | None = None
    bias_map: np.ndarray | None = None   # [out_c][out_h][out_w]
    low_scale_out: bool = False

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ParameterError("weights must be [out][in][kh][kw]")
        kh, kw = self.weights.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ParameterError("kernel dims must be odd")
        if self.stride not in (1, 2):
            raise ParameterError("stride must be 1 or 2")

    @property
    def out_c(self) -> int:
        return self.weights.shape[0]

    @property
    def in_c(self) -> int:
        return self.weights.shape[1]

    def effective_weights(self) -> np.ndarray:
        if self.pre_scale is None:
            return self.weights
        return self.weights * np.asarray(self.pre_scale)[None, :, None, None]


# ---------------------------------------------------------------------------
# layout arithmetic
# ---------------------------------------------------------------------------

class Layout:
    """Resolved slot addressing for one (format, shape, slot count)."""

    def __init__(self, fmt: PackingFormat, shape: TensorShape, n_slots: int):
        self.fmt = fmt
        self.shape = shape
        self.n_slots = n_slots
        self.m = fmt.multiplex
        self.span = fmt.span
        self.gx = fmt.gap
        if fmt.span % shape.h:
            raise PackingError(f"span {fmt.span} not divisible by height {shape.h}")
        self.gy = fmt.span // shape.h
        if shape.w * self.gx > self.gy:
            raise PackingError("rows overflow the block row pitch")
        block_total = self.m * self.span
        if block_total > n_slots:
            raise PackingError(
                f"multiplex {self.m} x span {self.span} exceeds {n_slots} slots"
            )
        self.r = n_slots // block_total
        self.n_cts = -(-shape.c // self.m)

    def channel_at(self, replica: int, block: int) -> int:
        """Channel group index held at (replica, block) for one ciphertext."""
        if self.fmt.variant == FORMAT_B:
            return (block + replica) % self.m
        return block

    def base_slot(self, replica: int, block: int) -> int:
        return replica * self.m * self.span + block * self.span

    def spatial_offsets(self) -> np.ndarray:
        """[h, w] slot offsets of the designated lattice inside a block."""
        ys = np.arange(self.shape.h) * self.gy
        xs = np.arange(self.shape.w) * self.gx
        return ys[:, None] + xs[None, :]

    def occupancy(self, ct_idx: int) -> np.ndarray:
        """0/1 vector of designated slots carrying real channels."""
        mask = np.zeros(self.n_slots)
        offs = self.spatial_offsets()
        for rho in range(self.r):
            for b in range(self.m):
                ch = ct_idx * self.m + self.channel_at(rho, b)
                if ch < self.shape.c:
                    mask.flat[self.base_slot(rho, b) + offs] = 1.0
        return mask

    def channel_values(self, ct_idx: int, per_channel: np.ndarray) -> np.ndarray:
        """Broadcast one scalar per channel over its designated slots."""
        vec = np.zeros(self.n_slots)
        offs = self.spatial_offsets()
        for rho in range(self.r):
            for b in range(self.m):
                ch = ct_idx * self.m + self.channel_at(rho, b)
                if ch < self.shape.c:
                    vec.flat[self.base_slot(rho, b) + offs] = per_channel[ch]
        return vec


def pack(tensor: np.ndarray, fmt: PackingFormat, n_slots: int) -> list[np.ndarray]:
    """Tensor -> slot vectors; undesignated (gap) slots are zero."""
    tensor = np.asarray(tensor, dtype=np.float64)
    shape = TensorShape(*tensor.shape)
    lay = Layout(fmt, shape, n_slots)
    offs = lay.spatial_offsets()
    out = []
    for i in range(lay.n_cts):
        vec = np.zeros(n_slots)
        for rho in range(lay.r):
            for b in range(lay.m):
                ch = i * lay.m + lay.channel_at(rho, b)
                if ch < shape.c:
                    vec.flat[lay.base_slot(rho, b) + offs] = tensor[ch]
        out.append(vec)
    return out


def unpack(vectors: Sequence[np.ndarray], fmt: PackingFormat,
           shape: TensorShape, n_slots: int) -> np.ndarray:
    """Slot vectors -> tensor, reading replica 0."""
    lay = Layout(fmt, shape, n_slots)
    if len(vectors) != lay.n_cts:
        raise PackingError(f"expected {lay.n_cts} vectors, got {len(vectors)}")
    offs = lay.spatial_offsets()
    out = np.zeros((shape.c, shape.h, shape.w))
    for c in range(shape.c):
        i, b = divmod(c, lay.m)
        # replica 0 of either variant holds channel b at block b
        out[c] = np.asarray(vectors[i]).flat[lay.base_slot(0, b) + offs]
    return out


def encrypt_tensor(tensor: np.ndarray, fmt: PackingFormat, ks: KeySet,
                   rng: np.random.Generator, level: int,
                   scale: float | None = None) -> PackedTensor:
    params = ks.params
    vecs = pack(tensor, fmt, params.slots)
    cts = [
        ckks.encrypt(ckks.encode(v, params, level, scale), ks, rng)
        for v in vecs
    ]
    return PackedTensor(cts=cts, fmt=fmt, shape=TensorShape(*np.shape(tensor)))


def decrypt_tensor(x: PackedTensor, ks: KeySet) -> np.ndarray:
    vecs = [
        ckks.decode(ckks.decrypt(ct, ks), ks.params, imag_tol=None)
        for ct in x.cts
    ]
    return unpack(vecs, x.fmt, x.shape, ks.params.slots)


# ---------------------------------------------------------------------------
# shared helpers for layer evaluation
# ---------------------------------------------------------------------------

def _mask_pt(values: np.ndarray, params: CkksParams, level: int, scale: float,
             cache: dict | None, key) -> tuple[np.ndarray, float] | None:
    """Encode a mask once, returning Montgomery rows; None for all-zero."""
    if not np.any(values):
        return None
    if cache is not None and key in cache:
        return cache[key]
    pt = ckks.encode(values, params, level, scale)
    entry = (to_mont_rows(pt.poly), pt.scale)
    if cache is not None:
        cache[key] = entry
    return entry


def _zero_ct(params: CkksParams, level: int, scale: float, n: int) -> Ciphertext:
    mods = params.mods_at(level)
    return Ciphertext(
        c0=zero_poly(mods, n, Domain.EVAL),
        c1=zero_poly(mods, n, Domain.EVAL),
        scale=scale,
        n=n,
    )


def _acc(acc: Ciphertext | None, term: Ciphertext, tally: OpTally | None) -> Ciphertext:
    if acc is None:
        return term
    if tally:
        tally.hadds += 1
    return ckks.hadd(acc, term)


def _rot(ct: Ciphertext, k: int, ks: KeySet, tally: OpTally | None) -> Ciphertext:
    k %= ct.slots
    if k == 0:
        return ct
    if tally:
        tally.rotations += 1
    return ckks.rotate(ct, k, ks)


def _pmul(ct: Ciphertext, mask: tuple[np.ndarray, float],
          tally: OpTally | None) -> Ciphertext:
    if tally:
        tally.pmults += 1
    return ckks.pmult_mont(ct, mask[0], mask[1])


def _rescale_all(cts: list[Ciphertext], params: CkksParams,
                 tally: OpTally | None) -> list[Ciphertext]:
    if tally:
        tally.rescales += len(cts)
    return [ckks.rescale(ct, params) for ct in cts]


def _tap_shifts(lay: Layout, kh: int, kw: int) -> list[tuple[int, int, int]]:
    """(dy, dx, slot shift) for each kernel tap."""
    taps = []
    for dy in range(-(kh // 2), kh // 2 + 1):
        for dx in range(-(kw // 2), kw // 2 + 1):
            taps.append((dy, dx, dy * lay.gy + dx * lay.gx))
    return taps


def _tap_mask_values(out_lay: Layout, in_shape: TensorShape, stride: int,
                     dy: int, dx: int, channel_weight) -> np.ndarray:
    """Stage-1 mask at landing positions for one kernel tap.

    channel_weight(rho, b) -> scalar gives the weight for the designated
    slots of block (rho, b); landings whose source pixel falls outside
    the image get zero, which is what realises the zero padding. For
    stride 2 the landings already live on the decimated lattice.
    """
    h_out, w_out = out_lay.shape.h, out_lay.shape.w
    vec = np.zeros(out_lay.n_slots)
    ys = np.arange(h_out) * stride + dy
    xs = np.arange(w_out) * stride + dx
    yv = (ys >= 0) & (ys < in_shape.h)
    xv = (xs >= 0) & (xs < in_shape.w)
    valid = yv[:, None] & xv[None, :]
    offs = out_lay.spatial_offsets()
    for rho in range(out_lay.r):
        for b in range(out_lay.m):
            wgt = channel_weight(rho, b)
            if wgt != 0.0:
                vec.flat[out_lay.base_slot(rho, b) + offs[valid]] = wgt
    return vec


# ---------------------------------------------------------------------------
# convolution, alternating formats
# ---------------------------------------------------------------------------

def _check_conv_input(x: PackedTensor, layer: ConvLayerSpec):
    if x.fmt != layer.in_format:
        raise PackingError(
            f"input format {x.fmt} does not match layer {layer.in_format}"
        )
    if x.level < 2:
        raise LevelError(f"convolution needs 2 levels, have {x.level}")
    if x.shape.c != layer.in_c:
        raise PackingError(
            f"input has {x.shape.c} channels, layer expects {layer.in_c}"
        )
    fin, fout = layer.in_format, layer.out_format
    if fin.multiplex != fout.multiplex or fin.span != fout.span:
        raise PackingError("multiplex and span are fixed across a network")
    if fout.gap != fin.gap * layer.stride:
        raise PackingError(
            f"stride {layer.stride} from gap {fin.gap} must emit gap "
            f"{fin.gap * layer.stride}, layer says {fout.gap}"
        )
    if layer.stride == 2 and (x.shape.h % 2 or x.shape.w % 2):
        raise PackingError("stride 2 needs even spatial dims")


def _out_shape(layer: ConvLayerSpec, shape: TensorShape) -> TensorShape:
    if layer.stride == 1:
        return TensorShape(layer.out_c, shape.h, shape.w)
    return TensorShape(layer.out_c, shape.h // 2, shape.w // 2)


def _finish_conv(stage1: list[Ciphertext], layer: ConvLayerSpec,
                 in_shape: TensorShape, ks: KeySet, tally: OpTally | None,
                 cache: dict | None, tag: str) -> PackedTensor:
    """Second level: format mask (+ stride decimation), rescale, bias."""
    params = ks.params
    out_shape = _out_shape(layer, in_shape)
    out_fmt = layer.out_format
    out_lay = Layout(out_fmt, out_shape, params.slots)
    target = params.delta ** 0.75 if layer.low_scale_out else params.delta
    masked = []
    for j, ct in enumerate(stage1):
        occ = out_lay.occupancy(j)
        mask = _mask_pt(occ, params, ct.level,
                        mask_scale_for(params, ct.level, ct.scale, target),
                        cache, (tag, "fmt", j, ct.level, ct.scale))
        if mask is None:
            masked.append(_zero_ct(params, ct.level - 1, target, ct.n))
            continue
        masked.append(ckks.rescale(_pmul(ct, mask, tally), params))
        if tally:
            tally.rescales += 1
    out = PackedTensor(cts=masked, fmt=out_fmt, shape=out_shape)

    bias_maps = None
    if layer.bias_map is not None:
        bias_maps = np.asarray(layer.bias_map, dtype=np.float64)
    elif layer.bias is not None:
        b = np.asarray(layer.bias, dtype=np.float64)
        bias_maps = np.broadcast_to(
            b[:, None, None], (out_shape.c, out_shape.h, out_shape.w)
        )
    if bias_maps is not None:
        vecs = pack(bias_maps, out_fmt, params.slots)
        for j, ct in enumerate(out.cts):
            if not np.any(vecs[j]):
                continue
            key = (tag, "bias", j, ct.level, ct.scale)
            if cache is not None and key in cache:
                pt = cache[key]
            else:
                pt = ckks.encode(vecs[j], params, ct.level, ct.scale)
                if cache is not None:
                    cache[key] = pt
            if tally:
                tally.hadds += 1
            out.cts[j] = ckks.padd(ct, pt)
    return out


def conv2d(x: PackedTensor, layer: ConvLayerSpec, ks: KeySet,
           tally: OpTally | None = None, cache: dict | None = None,
           tag: str = "conv") -> PackedTensor:
    """Format-alternating convolution (A -> B or B -> A), two levels."""
    _check_conv_input(x, layer)
    if layer.in_format.variant == layer.out_format.variant:
        raise PackingError("conv2d alternates formats; use the fixed baseline")
    if layer.in_format.variant == FORMAT_B:
        return _conv_b_to_a(x, layer, ks, tally, cache, tag)
    return _conv_a_to_b(x, layer, ks, tally, cache, tag)


def _conv_b_to_a(x: PackedTensor, layer: ConvLayerSpec, ks: KeySet,
                 tally: OpTally | None, cache: dict | None, tag: str
                 ) -> PackedTensor:
    """Masks select per-replica channels, a replica collapse does the sum."""
    params = ks.params
    lay = Layout(x.fmt, x.shape, params.slots)
    if lay.r < lay.m:
        raise PackingError(
            f"channel-interleaved input needs replicas >= multiplex "
            f"({lay.r} < {lay.m})"
        )
    w_eff = layer.effective_weights()
    kh, kw = w_eff.shape[2:]
    out_lay = Layout(layer.out_format, _out_shape(layer, x.shape), params.slots)
    n_out = out_lay.n_cts
    overcount = lay.m / lay.r  # each channel appears r/m times per collapse
    level0 = x.level
    s1_scale = mask_scale_for(params, level0, x.scale)

    taps_cache: dict[tuple[int, int], Ciphertext] = {}
    accs: list[Ciphertext | None] = [None] * n_out
    for i, ct in enumerate(x.cts):
        for dy, dx, shift in _tap_shifts(lay, kh, kw):
            tap = None
            for j in range(n_out):
                def wsel(rho, b, i=i, j=j, dy=dy, dx=dx):
                    c_in = i * lay.m + lay.channel_at(rho, b)
                    o = j * lay.m + b  # aligned output: block b = channel
                    if c_in >= x.shape.c or o >= layer.out_c:
                        return 0.0
                    return w_eff[o, c_in, dy + kh // 2, dx + kw // 2] * overcount

                vals = _tap_mask_values(out_lay, x.shape, layer.stride, dy, dx, wsel)
                mask = _mask_pt(vals, params, level0, s1_scale, cache,
                                (tag, "w", i, j, dy, dx, level0, x.scale))
                if mask is None:
                    continue
                if tap is None:
                    tap = taps_cache.get((i, shift))
                    if tap is None:
                        tap = _rot(ct, shift, ks, tally)
                        taps_cache[(i, shift)] = tap
                accs[j] = _acc(accs[j], _pmul(tap, mask, tally), tally)

    stage1 = []
    for j, acc in enumerate(accs):
        if acc is None:
            stage1.append(_zero_ct(params, level0 - 1, params.delta, params.n))
            continue
        acc = ckks.rescale(acc, params)
        if tally:
            tally.rescales += 1
        # collapse replicas: after log2(r) doubling steps every position
        # holds the sum over all replicas -> aligned copies (FormatA)
        step = lay.m * lay.span
        hop = lay.r // 2
        while hop >= 1:
            rot = _rot(acc, hop * step, ks, tally)
            if tally:
                tally.hadds += 1
            acc = ckks.hadd(acc, rot)
            hop //= 2
        stage1.append(acc)
    return _finish_conv(stage1, layer, x.shape, ks, tally, cache, tag)


def _conv_a_to_b(x: PackedTensor, layer: ConvLayerSpec, ks: KeySet,
                 tally: OpTally | None, cache: dict | None, tag: str
                 ) -> PackedTensor:
    """Block-granular rotations deliver each weight column to every
    staggered output channel at once."""
    params = ks.params
    lay = Layout(x.fmt, x.shape, params.slots)
    w_eff = layer.effective_weights()
    kh, kw = w_eff.shape[2:]
    out_shape = _out_shape(layer, x.shape)
    out_lay = Layout(layer.out_format, out_shape, params.slots)
    n_out = out_lay.n_cts
    level0 = x.level
    s1_scale = mask_scale_for(params, level0, x.scale)
    n_slots = params.slots

    taps_cache: dict[tuple[int, int], Ciphertext] = {}
    outs: list[Ciphertext | None] = [None] * n_out
    out_offs = out_lay.spatial_offsets()
    for j in range(n_out):
        for delta in range(lay.m):
            plane: Ciphertext | None = None
            for i, ct in enumerate(x.cts):
                for dy, dx, shift in _tap_shifts(lay, kh, kw):
                    # landing (rho, b) wants out channel (b+rho)%m and reads
                    # input channel (b+delta)%m; the mask is stored at the
                    # pre-rotation source slots, landing + delta*span
                    vals = np.zeros(n_slots)
                    ys = np.arange(out_shape.h) * layer.stride + dy
                    xs = np.arange(out_shape.w) * layer.stride + dx
                    valid = ((ys[:, None] >= 0) & (ys[:, None] < x.shape.h)
                             & (xs[None, :] >= 0) & (xs[None, :] < x.shape.w))
                    any_w = False
                    for rho in range(out_lay.r):
                        for b in range(lay.m):
                            o = j * lay.m + (b + rho) % lay.m
                            c_in = i * lay.m + (b + delta) % lay.m
                            if o >= layer.out_c or c_in >= x.shape.c:
                                continue
                            wgt = w_eff[o, c_in, dy + kh // 2, dx + kw // 2]
                            if wgt == 0.0:
                                continue
                            any_w = True
                            land = out_lay.base_slot(rho, b) + out_offs[valid]
                            src = (land + delta * lay.span) % n_slots
                            vals.flat[src] = wgt
                    if not any_w:
                        continue
                    mask = _mask_pt(vals, params, level0, s1_scale, cache,
                                    (tag, "w", i, j, delta, dy, dx, level0,
                                     x.scale))
                    tap = taps_cache.get((i, shift))
                    if tap is None:
                        tap = _rot(ct, shift, ks, tally)
                        taps_cache[(i, shift)] = tap
                    plane = _acc(plane, _pmul(tap, mask, tally), tally)
            if plane is None:
                continue
            plane = ckks.rescale(plane, params)
            if tally:
                tally.rescales += 1
            landed = _rot(plane, delta * lay.span, ks, tally)
            outs[j] = _acc(outs[j], landed, tally)

    stage1 = [
        o if o is not None else _zero_ct(params, level0 - 1, params.delta, params.n)
        for o in outs
    ]
    return _finish_conv(stage1, layer, x.shape, ks, tally, cache, tag)


def conv2d_fixed_baseline(x: PackedTensor, layer: ConvLayerSpec, ks: KeySet,
                          tally: OpTally | None = None,
                          cache: dict | None = None,
                          tag: str = "conv-fixed") -> PackedTensor:
    """Single-layout convolution: every (tap, channel-offset) pair costs a
    rotation, the price of keeping one dense packing."""
    _check_conv_input(x, layer)
    if layer.in_format.variant != FORMAT_A or layer.out_format.variant != FORMAT_A:
        raise PackingError("the fixed baseline runs channel-major only")
    params = ks.params
    lay = Layout(x.fmt, x.shape, params.slots)
    w_eff = layer.effective_weights()
    kh, kw = w_eff.shape[2:]
    out_lay = Layout(layer.out_format, _out_shape(layer, x.shape), params.slots)
    n_out = out_lay.n_cts
    level0 = x.level
    s1_scale = mask_scale_for(params, level0, x.scale)

    rot_cache: dict[tuple[int, int], Ciphertext] = {}
    accs: list[Ciphertext | None] = [None] * n_out
    for i, ct in enumerate(x.cts):
        for delta in range(lay.m):
            for dy, dx, tap_shift in _tap_shifts(lay, kh, kw):
                shift = (tap_shift + delta * lay.span) % params.slots
                for j in range(n_out):
                    def wsel(rho, b, i=i, j=j, delta=delta, dy=dy, dx=dx):
                        o = j * lay.m + b
                        c_in = i * lay.m + (b + delta) % lay.m
                        if o >= layer.out_c or c_in >= x.shape.c:
                            return 0.0
                        return w_eff[o, c_in, dy + kh // 2, dx + kw // 2]

                    vals = _tap_mask_values(out_lay, x.shape, layer.stride, dy, dx, wsel)
                    mask = _mask_pt(vals, params, level0, s1_scale, cache,
                                    (tag, "w", i, j, delta, dy, dx, level0,
                                     x.scale))
                    if mask is None:
                        continue
                    rot = rot_cache.get((i, shift))
                    if rot is None:
                        rot = _rot(ct, shift, ks, tally)
                        rot_cache[(i, shift)] = rot
                    accs[j] = _acc(accs[j], _pmul(rot, mask, tally), tally)

    stage1 = []
    for acc in accs:
        if acc is None:
            stage1.append(_zero_ct(params, level0 - 1, params.delta, params.n))
            continue
        acc = ckks.rescale(acc, params)
        if tally:
            tally.rescales += 1
        stage1.append(acc)
    return _finish_conv(stage1, layer, x.shape, ks, tally, cache, tag)


# ---------------------------------------------------------------------------
# activation, pooling, downsample, fully connected
# ---------------------------------------------------------------------------

def he_activation(x: PackedTensor, quads: Sequence, ks: KeySet,
                  tally: OpTally | None = None, cache: dict | None = None,
                  tag: str = "act") -> PackedTensor:
    """One-level quadratic activation: x * (x + b/a) per channel.

    The a factor and constant term are absorbed by the adjacent
    convolution (its pre_scale and bias_map), per each quad's fold_note.
    """
    if x.level < 1:
        raise LevelError("activation needs one level")
    if len(quads) != x.shape.c:
        raise PackingError(f"{len(quads)} activations for {x.shape.c} channels")
    params = ks.params
    lay = Layout(x.fmt, x.shape, params.slots)
    ratios = np.array([q.mask_value for q in quads])
    out_cts = []
    for i, ct in enumerate(x.cts):
        vals = lay.channel_values(i, ratios)
        key = (tag, "mask", i, ct.level, ct.scale)
        if cache is not None and key in cache:
            pt = cache[key]
        else:
            pt = ckks.encode(vals, params, ct.level, ct.scale)
            if cache is not None:
                cache[key] = pt
        if tally:
            tally.hadds += 1
            tally.hmults += 1
            tally.rescales += 1
        shifted = ckks.padd(ct, pt)
        out_cts.append(ckks.rescale(ckks.hmult(ct, shifted, ks), params))
    return PackedTensor(cts=out_cts, fmt=x.fmt, shape=x.shape)


def downsample(x: PackedTensor, ks: KeySet, tally: OpTally | None = None,
               cache: dict | None = None, tag: str = "down",
               target_format: PackingFormat | None = None) -> PackedTensor:
    """Keep the even sublattice; gap doubles in place. One level."""
    if x.level < 1:
        raise LevelError("downsample needs one level")
    if x.shape.h % 2 or x.shape.w % 2:
        raise PackingError("downsample needs even spatial dims")
    params = ks.params
    out_fmt = x.fmt.downsampled()
    if target_format is not None and target_format != out_fmt:
        raise PackingError(f"expected {out_fmt}, requested {target_format}")
    out_shape = TensorShape(x.shape.c, x.shape.h // 2, x.shape.w // 2)
    out_lay = Layout(out_fmt, out_shape, params.slots)
    out_cts = []
    for i, ct in enumerate(x.cts):
        occ = out_lay.occupancy(i)
        mask = _mask_pt(occ, params, ct.level,
                        mask_scale_for(params, ct.level, ct.scale),
                        cache, (tag, "mask", i, ct.level, ct.scale))
        if mask is None:
            out_cts.append(_zero_ct(params, ct.level - 1, params.delta, ct.n))
            continue
        if tally:
            tally.rescales += 1
        out_cts.append(ckks.rescale(_pmul(ct, mask, tally), params))
    return PackedTensor(cts=out_cts, fmt=out_fmt, shape=out_shape)


def avgpool_global(x: PackedTensor, ks: KeySet, tally: OpTally | None = None,
                   cache: dict | None = None, tag: str = "pool") -> PackedTensor:
    """Spatial mean per channel via a rotate-add tree; zero levels.

    The 1/(h*w) factor is an exact integer-free pmult (the constant is
    encoded at scale h*w, giving coefficient 1), so no rescale happens;
    the next rescale point re-targets the grown scale.
    """
    params = ks.params
    lay = Layout(x.fmt, x.shape, params.slots)
    h, w = x.shape.h, x.shape.w
    if h == 1 and w == 1:
        return PackedTensor(cts=list(x.cts), fmt=x.fmt, shape=x.shape)
    out_cts = []
    for i, ct in enumerate(x.cts):
        acc = ct
        hop = h // 2
        while hop >= 1:
            rot = _rot(acc, hop * lay.gy, ks, tally)
            if tally:
                tally.hadds += 1
            acc = ckks.hadd(acc, rot)
            hop //= 2
        hop = w // 2
        while hop >= 1:
            rot = _rot(acc, hop * lay.gx, ks, tally)
            if tally:
                tally.hadds += 1
            acc = ckks.hadd(acc, rot)
            hop //= 2
        inv = np.full(params.slots, 1.0 / (h * w))
        mask = _mask_pt(inv, params, acc.level, float(h * w), cache,
                        (tag, "inv", acc.level))
        out_cts.append(_pmul(acc, mask, tally))
    out_shape = TensorShape(x.shape.c, 1, 1)
    return PackedTensor(cts=out_cts, fmt=x.fmt, shape=out_shape)


def fully_connected(x: PackedTensor, weight: np.ndarray,
                    bias: np.ndarray | None, ks: KeySet,
                    tally: OpTally | None = None, cache: dict | None = None,
                    tag: str = "fc") -> Ciphertext:
    """Dense head; logit j lands at slot j * span. One level."""
    if x.level < 1:
        raise LevelError("fully connected needs one level")
    if x.shape.h != 1 or x.shape.w != 1:
        raise PackingError("fully connected expects pooled (c,1,1) input")
    weight = np.asarray(weight, dtype=np.float64)
    n_out, n_in = weight.shape
    if n_in != x.shape.c:
        raise PackingError(f"weight expects {n_in} inputs, tensor has {x.shape.c}")
    params = ks.params
    lay = Layout(x.fmt, x.shape, params.slots)
    total_blocks = lay.r * lay.m
    span = lay.span
    s1_scale = mask_scale_for(params, x.level, x.scale)

    # landing-centric shift selection: logit j reads channel k from the
    # nearest replica copy ahead of it in the ring
    by_shift: dict[int, list[tuple[int, np.ndarray]]] = {}
    for i in range(lay.n_cts):
        shift_vals: dict[int, np.ndarray] = {}
        for j in range(n_out):
            for k_local in range(lay.m):
                k = i * lay.m + k_local
                if k >= x.shape.c or weight[j, k] == 0.0:
                    continue
                best = None
                for rho in range(lay.r):
                    for b in range(lay.m):
                        if lay.channel_at(rho, b) != k_local:
                            continue
                        d = (rho * lay.m + b - j) % total_blocks
                        if best is None or d < best:
                            best = d
                vec = shift_vals.setdefault(best, np.zeros(params.slots))
                vec[j * span] = weight[j, k]
        lst = by_shift.setdefault(i, [])
        lst.extend(shift_vals.items())

    acc: Ciphertext | None = None
    for i, ct in enumerate(x.cts):
        for d, vals in by_shift.get(i, []):
            mask = _mask_pt(vals, params, x.level, s1_scale, cache,
                            (tag, "w", i, d, x.level, x.scale))
            if mask is None:
                continue
            rot = _rot(ct, d * span, ks, tally)
            acc = _acc(acc, _pmul(rot, mask, tally), tally)
    if acc is None:
        acc = _zero_ct(params, x.level, x.scale * s1_scale, params.n)
    out = ckks.rescale(acc, params)
    if tally:
        tally.rescales += 1
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if np.any(bias):
            vec = np.zeros(params.slots)
            for j in range(n_out):
                vec[j * span] = bias[j]
            key = (tag, "bias", out.level, out.scale)
            if cache is not None and key in cache:
                pt = cache[key]
            else:
                pt = ckks.encode(vec, params, out.level, out.scale)
                if cache is not None:
                    cache[key] = pt
            if tally:
                tally.hadds += 1
            out = ckks.padd(out, pt)
    return out


def read_logits(ct: Ciphertext, n_out: int, fmt: PackingFormat,
                ks: KeySet) -> np.ndarray:
    vals = ckks.decode(ckks.decrypt(ct, ks), ks.params, imag_tol=None)
    return vals[np.arange(n_out) * fmt.span]


# ---------------------------------------------------------------------------
# rotation-step enumeration (for keygen planning)
# ---------------------------------------------------------------------------

def conv_rotation_steps(layer: ConvLayerSpec, shape: TensorShape,
                        n_slots: int, fixed: bool = False) -> set[int]:
    lay = Layout(layer.in_format, shape, n_slots)
    kh, kw = layer.weights.shape[2:]
    steps: set[int] = set()
    taps = [s for _, _, s in _tap_shifts(lay, kh, kw)]
    if fixed:
        for delta in range(lay.m):
            for t in taps:
                steps.add((t + delta * lay.span) % n_slots)
    elif layer.in_format.variant == FORMAT_B:
        steps.update(t % n_slots for t in taps)
        step = lay.m * lay.span
        hop = lay.r // 2
        while hop >= 1:
            steps.add((hop * step) % n_slots)
            hop //= 2
    else:
        steps.update(t % n_slots for t in taps)
        for delta in range(1, lay.m):
            steps.add(delta * lay.span)
    steps.discard(0)
    return steps


def pool_fc_rotation_steps(shape: TensorShape, fmt: PackingFormat,
                           n_slots: int, fc_in_c: int, fc_out: int) -> set[int]:
    lay = Layout(fmt, shape, n_slots)
    steps: set[int] = set()
    hop = shape.h // 2
    while hop >= 1:
        steps.add((hop * lay.gy) % n_slots)
        hop //= 2
    hop = shape.w // 2
    while hop >= 1:
        steps.add((hop * lay.gx) % n_slots)
        hop //= 2
    pooled = Layout(fmt, TensorShape(fc_in_c, 1, 1), n_slots)
    total_blocks = pooled.r * pooled.m
    for j in range(fc_out):
        for k in range(fc_in_c):
            k_local = k % pooled.m
            best = None
            for rho in range(pooled.r):
                for b in range(pooled.m):
                    if pooled.channel_at(rho, b) != k_local:
                        continue
                    d = (rho * pooled.m + b - j) % total_blocks
                    if best is None or d < best:
                        best = d
            steps.add((best * pooled.span) % n_slots)
    steps.discard(0)
    return steps
