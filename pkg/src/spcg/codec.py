"""Multiscale encode/decode and the bitstream container.

The pyramid is always built down to scale 0 (one occupied root voxel), so
coding starts at scale 1 and N is the only geometry metadata in the header.
Every coded scale gets its own arithmetic-coder payload.
"""
from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .entropy import BinaryDecoder, BinaryEncoder, FactorizedModel, TruncatedPayload
from .modelfile import weights_checksum
from .models import (
    MultiStageSOPA,
    Network,
    OneStageSOPA,
    SLNEDecoder,
    SLNEEncoder,
    SOPAPosition,
    StagePrediction,
    lossy_threshold,
    reconstruct,
)
from .nn.layers import sigmoid
from .pointcloud import MAX_PRECISION, PointCloud
from .sparse_tensor import CoordSet, OccupancyRole, SparseTensor, build_pyramid

MAGIC = b"SPCG"
VERSION = 1


class Mode(enum.IntEnum):
    LOSSLESS = 0
    LOSSY_DENSE = 1
    LOSSY_SPARSE = 2


LOSSLESS_ARCHS = ("one_stage_sopa", "multistage_sopa_3", "multistage_sopa_8", "slne")


class ChunkKind(enum.IntEnum):
    OCCUPANCY = 0
    FEATURE = 1
    POSITION = 2


HAS_COUNT = 0x80


class BitstreamError(ValueError):
    pass


class ModelMismatch(BitstreamError):
    def __init__(self, msg="model mismatch"):
        super().__init__(msg)


# ---------------------------------------------------------------------------
# varints


def write_varint(v: int) -> bytes:
    if v < 0:
        raise ValueError("varint must be non-negative")
    out = bytearray()
    while True:
        b = v & 0x7F
        v >>= 7
        if v:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def read_varint(data: bytes, pos: int) -> tuple[int, int]:
    v = shift = 0
    while True:
        if pos >= len(data):
            raise BitstreamError("truncated varint")
        b = data[pos]
        pos += 1
        v |= (b & 0x7F) << shift
        if not b & 0x80:
            return v, pos
        shift += 7
        if shift > 63:
            raise BitstreamError("varint too long")


# ---------------------------------------------------------------------------
# container


@dataclass
class CodecConfig:
    mode: Mode = Mode.LOSSLESS
    N: int = 8
    m: int = 0
    lossless_arch: str = "multistage_sopa_8"

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if not 1 <= self.N <= MAX_PRECISION:
            raise ValueError(f"N={self.N} outside [1, {MAX_PRECISION}]")
        if self.lossless_arch not in LOSSLESS_ARCHS:
            raise ValueError(f"unknown lossless arch {self.lossless_arch!r}")
        if self.mode == Mode.LOSSLESS:
            self.m = self.N
        elif not 0 < self.m < self.N:
            raise ValueError(f"lossy modes need 0 < m < N (got m={self.m}, N={self.N})")

    def required_archs(self) -> list[str]:
        """Arch ids whose weights this configuration uses, in checksum order."""
        arch = "one_stage_sopa" if self.lossless_arch == "slne" else self.lossless_arch
        need = []
        if self.lossless_arch == "slne":
            need += ["slne_encoder", "slne_decoder"]
        else:
            need.append(arch)
        if self.mode == Mode.LOSSY_DENSE:
            need += ["slne_encoder", "slne_decoder", "one_stage_sopa"]
        elif self.mode == Mode.LOSSY_SPARSE:
            need.append("sopa_position")
        return sorted(set(need))


def models_checksum(models: dict[str, Network], archs: list[str]) -> int:
    h = hashlib.blake2b(digest_size=8)
    for a in archs:
        if a not in models:
            raise KeyError(f"model not found for arch {a!r}")
        h.update(a.encode() + weights_checksum(models[a]).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


@dataclass
class Chunk:
    scale: int
    kind: ChunkKind
    payload: bytes
    count: int | None = None

    def to_bytes(self) -> bytes:
        flags = int(self.kind) | (HAS_COUNT if self.count is not None else 0)
        out = struct.pack("<BB", self.scale, flags)
        if self.count is not None:
            out += write_varint(self.count)
        return out + struct.pack("<I", len(self.payload)) + self.payload


@dataclass
class Bitstream:
    config: CodecConfig
    model_checksum: int
    original_count: int
    chunks: list[Chunk] = field(default_factory=list)
    # encoder-side instrumentation, not serialised: scale -> (symbols, ideal bits)
    stats: dict = field(default_factory=dict, compare=False, repr=False)

    def header_bytes(self) -> bytes:
        c = self.config
        return (MAGIC + struct.pack("<BBBBBQ", VERSION, int(c.mode), c.N, c.m,
                                    LOSSLESS_ARCHS.index(c.lossless_arch), self.model_checksum)
                + write_varint(self.original_count) + write_varint(len(self.chunks)))

    def to_bytes(self) -> bytes:
        body = self.header_bytes() + b"".join(ch.to_bytes() for ch in self.chunks)
        return body + hashlib.blake2b(body, digest_size=8).digest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        data = bytes(data)
        if len(data) < 4 or data[:4] != MAGIC:
            raise BitstreamError("not an SPCG bitstream (bad magic)")
        if len(data) < 4 + 13 + 2 + 8:
            raise BitstreamError("truncated bitstream")
        body, tail = data[:-8], data[-8:]
        if hashlib.blake2b(body, digest_size=8).digest() != tail:
            raise BitstreamError("content checksum mismatch (corrupt bitstream)")
        version, mode, N, m, arch, checksum = struct.unpack_from("<BBBBBQ", body, 4)
        if version != VERSION:
            raise BitstreamError(f"unsupported bitstream version {version}")
        if arch >= len(LOSSLESS_ARCHS) or mode > 2:
            raise BitstreamError("corrupt header")
        pos = 4 + 13
        original, pos = read_varint(body, pos)
        nchunks, pos = read_varint(body, pos)
        try:
            cfg = CodecConfig(Mode(mode), N, m, LOSSLESS_ARCHS[arch])
        except ValueError as e:
            raise BitstreamError(f"corrupt header: {e}") from None
        chunks = []
        for _ in range(nchunks):
            if pos + 2 > len(body):
                raise BitstreamError("truncated chunk header")
            scale, flags = struct.unpack_from("<BB", body, pos)
            pos += 2
            count = None
            if flags & HAS_COUNT:
                count, pos = read_varint(body, pos)
            if pos + 4 > len(body):
                raise BitstreamError("truncated chunk header")
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            if pos + n > len(body):
                raise BitstreamError("chunk length exceeds stream")
            try:
                kind = ChunkKind(flags & 0x7F)
            except ValueError:
                raise BitstreamError(f"unknown chunk kind {flags & 0x7F}") from None
            chunks.append(Chunk(scale, kind, body[pos:pos + n], count))
            pos += n
        if pos != len(body):
            raise BitstreamError("trailing bytes before checksum")
        return cls(cfg, checksum, original, chunks)

    def find(self, scale: int, kind: ChunkKind) -> Chunk:
        for ch in self.chunks:
            if ch.scale == scale and ch.kind == kind:
                return ch
        raise BitstreamError(f"missing {kind.name.lower()} chunk for scale {scale}")


@dataclass
class RateReport:
    per_scale_bits: dict[int, int]
    header_bits: int
    total_bits: int
    bpp: float

    def to_dict(self) -> dict:
        return {"per_scale_bits": {str(k): v for k, v in self.per_scale_bits.items()},
                "header_bits": self.header_bits, "total_bits": self.total_bits, "bpp": self.bpp}


def rate_report(bs: Bitstream, original_count: int | None = None) -> RateReport:
    """Per-scale bits count each chunk's framing plus payload; header bits include the trailer."""
    count = bs.original_count if original_count is None else original_count
    per: dict[int, int] = {}
    for ch in bs.chunks:
        per[ch.scale] = per.get(ch.scale, 0) + 8 * len(ch.to_bytes())
    total = 8 * len(bs.to_bytes())
    return RateReport(per, total - sum(per.values()), total, total / count if count else float("nan"))


# ---------------------------------------------------------------------------
# per-scale coding steps


def _ones(cs: CoordSet) -> SparseTensor:
    return SparseTensor(cs, np.ones((len(cs), 1)), OccupancyRole.POV)


def _children(cs: CoordSet, mask: np.ndarray) -> CoordSet:
    return CoordSet.from_keys(cs.keys[np.asarray(mask, dtype=bool)], cs.scale)


class _Occupancy:
    """Lossless occupancy coding of scale i given the exact scale i-1 POVs."""

    def __init__(self, models: dict[str, Network], arch: str):
        self.arch = arch
        self.models = models

    def encode(self, pyr: list[CoordSet], i: int) -> tuple[list[Chunk], int, float]:
        prev, truth = pyr[i - 1], pyr[i]
        enc = BinaryEncoder()
        chunks = []
        if self.arch in ("multistage_sopa_3", "multistage_sopa_8"):
            net: MultiStageSOPA = self.models[self.arch]

            def resolve(stage, rows, probs):
                bits = (truth.lookup_keys(children.keys[rows]) >= 0).astype(np.int64)
                enc.encode(bits, probs)
                return bits

            children = _ones(prev).coordset.upscaled()
            net.run(_ones(prev), resolve)
        elif self.arch == "slne":
            # try with and without side information, keep whichever is smaller
            dec_net: SLNEDecoder = self.models["slne_decoder"]
            options = [(dec_net.zero_features(prev), None)]
            x, fchunk = _slne_side(self.models, pyr, i, prev)
            if fchunk is not None:
                options.append((x, fchunk))
            best = None
            for x, fchunk in options:
                e = BinaryEncoder()
                children, z = dec_net.sopa.logits(x)
                e.encode((truth.lookup_keys(children.keys) >= 0).astype(np.int64), sigmoid(z))
                payload = e.finish()
                size = len(payload) + (len(fchunk.to_bytes()) if fchunk is not None else 0)
                if best is None or size < best[0]:
                    best = (size, e, payload, fchunk)
            _, enc, payload, fchunk = best
            chunks = [Chunk(i, ChunkKind.OCCUPANCY, payload)]
            if fchunk is not None:
                chunks.append(fchunk)
            return chunks, enc.count, enc.ideal_bits + fchunk._ideal if fchunk else enc.ideal_bits
        else:
            net = self.models["one_stage_sopa"]
            children, z = net.logits(_ones(prev))
            bits = (truth.lookup_keys(children.keys) >= 0).astype(np.int64)
            enc.encode(bits, sigmoid(z))
        chunks.insert(0, Chunk(i, ChunkKind.OCCUPANCY, enc.finish()))
        return chunks, enc.count, enc.ideal_bits

    def decode(self, bs: Bitstream, levels: list[CoordSet], i: int) -> CoordSet:
        prev = levels[i - 1]
        dec = BinaryDecoder(bs.find(i, ChunkKind.OCCUPANCY).payload)
        if self.arch in ("multistage_sopa_3", "multistage_sopa_8"):
            net: MultiStageSOPA = self.models[self.arch]
            children, surv, _ = net.run(_ones(prev), lambda s, rows, probs: dec.decode(probs))
            return CoordSet.from_keys(children.keys[np.sort(surv)], i)
        if self.arch == "slne":
            x = _slne_side_decode(self.models, bs, levels, i, prev)
            net = self.models["slne_decoder"].sopa
        else:
            x = _ones(prev)
            net = self.models["one_stage_sopa"]
        children, z = net.logits(x)
        return _children(children, dec.decode(sigmoid(z)))


def _slne_side(models, pyr: list[CoordSet], i: int, prev: CoordSet):
    """Encoder side information for scale i: latents of the scale-i POVs at scale i-2.

    Returns (SOPA input features at scale i-1, feature chunk or None).
    """
    dec: SLNEDecoder = models["slne_decoder"]
    if i < 2:
        return dec.zero_features(prev), None
    enc: SLNEEncoder = models["slne_encoder"]
    q = enc.encode(_ones(pyr[i]))
    if q.coordset != pyr[i - 2]:
        raise RuntimeError("latent coordinates do not match the scale i-2 POVs")
    fm = FactorizedModel(dec.scales())
    qi = q.feats.astype(np.int64)
    chunk = Chunk(i, ChunkKind.FEATURE, fm.encode(qi))
    chunk._ideal = fm.rate(qi)  # instrumentation only
    return dec.features(q.with_feats(qi.astype(np.float64)), prev), chunk


def _slne_side_decode(models, bs: Bitstream, levels: list[CoordSet], i: int, prev: CoordSet) -> SparseTensor:
    dec: SLNEDecoder = models["slne_decoder"]
    if i < 2:
        return dec.zero_features(prev)
    lat = levels[i - 2]
    fm = FactorizedModel(dec.scales())
    try:
        ch = bs.find(i, ChunkKind.FEATURE)
    except BitstreamError:
        return dec.zero_features(prev)  # encoder skipped side information here
    q = fm.decode(ch.payload, len(lat))
    return dec.features(SparseTensor(lat, q.astype(np.float64)), prev)


def _top_k(children: CoordSet, z: np.ndarray, k: int) -> CoordSet:
    keep = lossy_threshold(StagePrediction(children.coords, sigmoid(z)), k)
    return CoordSet.from_keys(children.keys[keep], children.scale)


# ---------------------------------------------------------------------------
# public API


def _check_models(cfg: CodecConfig, models: dict[str, Network]):
    for a in cfg.required_archs():
        if a not in models:
            raise KeyError(f"model not found for arch {a!r}")


def encode(cloud: PointCloud, cfg: CodecConfig, models: dict[str, Network]) -> Bitstream:
    if len(cloud) == 0:
        raise ValueError("cannot encode an empty cloud")
    if cloud.N != cfg.N:
        raise ValueError(f"cloud precision {cloud.N} differs from config N={cfg.N}")
    _check_models(cfg, models)
    cs = cloud.coordset()  # validates range, dedups
    pyr = build_pyramid(cs)
    bs = Bitstream(cfg, models_checksum(models, cfg.required_archs()), cloud.original_count)
    occ = _Occupancy(models, cfg.lossless_arch)
    top = cfg.N if cfg.mode == Mode.LOSSLESS else cfg.m
    for i in range(1, top + 1):
        chunks, nsym, ideal = occ.encode(pyr, i)
        bs.chunks.extend(chunks)
        bs.stats[i] = (nsym, ideal)
    if cfg.mode == Mode.LOSSY_DENSE:
        m, N = cfg.m, cfg.N
        dec: SLNEDecoder = models["slne_decoder"]
        x, fchunk = _slne_side(models, pyr, m + 1, pyr[m])
        children, z = dec.sopa.logits(x)
        rec = _top_k(children, z, len(pyr[m + 1]))
        if fchunk is None:
            fchunk = Chunk(m + 1, ChunkKind.FEATURE, b"")
        fchunk.count = len(pyr[m + 1])
        bs.chunks.append(fchunk)
        bs.stats[m + 1] = (0, getattr(fchunk, "_ideal", 0.0))
        plain: OneStageSOPA = models["one_stage_sopa"]
        for i in range(m + 2, N + 1):
            children, z = plain.logits(_ones(rec))
            rec = _top_k(children, z, len(pyr[i]))
            bs.chunks.append(Chunk(i, ChunkKind.OCCUPANCY, b"", len(pyr[i])))
    elif cfg.mode == Mode.LOSSY_SPARSE:
        bs.chunks.append(Chunk(cfg.N, ChunkKind.POSITION, b"", len(pyr[cfg.m])))
    return bs


def decode(bs: "Bitstream | bytes", models: dict[str, Network]) -> PointCloud:
    if not isinstance(bs, Bitstream):
        bs = Bitstream.from_bytes(bs)
    cfg = bs.config
    try:
        expected = models_checksum(models, cfg.required_archs())
    except KeyError:
        raise ModelMismatch("model mismatch: required model missing") from None
    if expected != bs.model_checksum:
        raise ModelMismatch()
    occ = _Occupancy(models, cfg.lossless_arch)
    levels = [CoordSet(np.zeros((1, 3), dtype=np.int64), 0)]
    top = cfg.N if cfg.mode == Mode.LOSSLESS else cfg.m
    try:
        for i in range(1, top + 1):
            levels.append(occ.decode(bs, levels, i))
            if len(levels[-1]) == 0:
                raise BitstreamError(f"scale {i} decoded to an empty set")
        if cfg.mode == Mode.LOSSLESS:
            return PointCloud(np.array(levels[cfg.N].coords), cfg.N, bs.original_count)
        m, N = cfg.m, cfg.N
        if cfg.mode == Mode.LOSSY_SPARSE:
            ch = bs.find(N, ChunkKind.POSITION)
            if ch.count != len(levels[m]):
                raise BitstreamError("position chunk count disagrees with the scale-m POVs")
            net: SOPAPosition = models["sopa_position"]
            pts = reconstruct(levels[m].coords, net.predict(_ones(levels[m]), N).offsets, N, m)
            return PointCloud(pts, N, bs.original_count)
        dec: SLNEDecoder = models["slne_decoder"]
        fch = bs.find(m + 1, ChunkKind.FEATURE)
        x = _slne_side_decode(models, bs, levels, m + 1, levels[m])
        children, z = dec.sopa.logits(x)
        rec = _top_k(children, z, _count(fch, len(children)))
        plain: OneStageSOPA = models["one_stage_sopa"]
        for i in range(m + 2, N + 1):
            ch = bs.find(i, ChunkKind.OCCUPANCY)
            children, z = plain.logits(_ones(rec))
            rec = _top_k(children, z, _count(ch, len(children)))
        return PointCloud(np.array(rec.coords), N, bs.original_count)
    except TruncatedPayload as e:
        raise BitstreamError(f"corrupt payload: {e}") from None


def _count(ch: Chunk, limit: int) -> int:
    if ch.count is None or ch.count > limit:
        raise BitstreamError(f"invalid point count at scale {ch.scale}")
    return ch.count


def naive_truncate(cloud: PointCloud, m: int) -> PointCloud:
    """Baseline: keep the scale-m POVs and place each at its block corner (zero offsets)."""
    cs = build_pyramid(cloud.coordset())[m]
    return PointCloud(np.array(cs.coords) << (cloud.N - m), cloud.N, cloud.original_count)
