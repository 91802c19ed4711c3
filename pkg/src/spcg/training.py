"""Synthetic data, losses and training loops."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .entropy import P_CLAMP, laplace_rate_and_grads
from .models import (
    MultiStageSOPA,
    Network,
    OneStageSOPA,
    SLNEDecoder,
    SLNEEncoder,
    SOPAPosition,
    build_network,
)
from .nn.layers import sigmoid
from .nn.optim import Adam, cosine_lr
from .pointcloud import PointCloud
from .sparse_tensor import CoordSet, OccupancyRole, SparseTensor, build_pyramid

KINDS = ("sphere_shell", "box_surface", "plane_patch", "line_scan", "union")
TRAIN_ARCHS = ("one_stage_sopa", "multistage_sopa_3", "multistage_sopa_8", "slne", "sopa_position")
LN2 = math.log(2.0)

# ---------------------------------------------------------------------------
# synthetic clouds


def _to_cloud(pts: np.ndarray, N: int) -> PointCloud:
    q = np.rint(pts).astype(np.int64)
    q = q[np.all((q >= 0) & (q < (1 << N)), axis=1)]
    if len(q) == 0:
        q = np.full((1, 3), (1 << N) // 2, dtype=np.int64)
    c = PointCloud(q, N).canonical()
    c.original_count = len(c)
    return c


def _sphere(rng, center, r):
    n = max(int(4 * math.pi * r * r * 6), 64)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return center + r * v


def _rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def _box(rng, center, half):
    dims = half * rng.uniform(0.5, 1.0, size=3)
    area = 8 * (dims[0] * dims[1] + dims[1] * dims[2] + dims[0] * dims[2])
    n = max(int(area * 6), 64)
    u = rng.uniform(-1, 1, size=(n, 3))
    axis = rng.integers(0, 3, size=n)
    u[np.arange(n), axis] = rng.choice([-1.0, 1.0], size=n)
    return center + (u * dims) @ _rotation(rng).T


def _plane(rng, center, half):
    n = max(int(4 * half * half * 6), 64)
    uv = rng.uniform(-half, half, size=(n, 2))
    basis = _rotation(rng)[:2]
    return center + uv @ basis


def _scan(rng, center, half, N):
    """Scan lines from a virtual sensor hitting a ground plane and a surrounding cylinder."""
    beams = int(rng.integers(6, 12))
    height = half * rng.uniform(0.3, 0.6)
    ground = center[2] - height
    wall = half * rng.uniform(0.7, 1.0)
    elev = np.linspace(-0.6, 0.2, beams)
    steps = max(int(2 * math.pi * wall / 2.5), 32)
    az = np.linspace(0, 2 * math.pi, steps, endpoint=False)
    pts = []
    for e in elev:
        d = np.stack([np.cos(az) * np.cos(e), np.sin(az) * np.cos(e), np.full_like(az, np.sin(e))], 1)
        t_wall = wall / max(np.cos(e), 1e-9)
        t_ground = np.inf if e >= 0 else height / -np.sin(e)
        t = min(t_wall, t_ground) * rng.uniform(0.97, 1.03, size=len(az))
        pts.append(center + d * t[:, None])
    return np.concatenate(pts)


def synth_cloud(kind: str, N: int, seed: int, size: float = 0.75) -> PointCloud:
    """Deterministic synthetic cloud.

    ``size`` is the object's extent as a fraction of the 2^N cube; a sphere
    shell gets radius ``size * 2^N / 2`` (24 at N=6 with the default).
    Surface kinds give dense occupancy, ``line_scan`` gives sparse scan rings.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}; expected one of {', '.join(KINDS)}")
    if not 4 <= N <= 10:
        raise ValueError("synthetic clouds support N in [4, 10]")
    rng = np.random.default_rng([seed, KINDS.index(kind), N])
    side = float(1 << N)
    half = 0.5 * size * side
    slack = max(0.0, side / 2 - half - 1)
    center = side / 2 + rng.uniform(-slack, slack, size=3) * 0.5
    if kind == "sphere_shell":
        pts = _sphere(rng, center, half)
    elif kind == "box_surface":
        pts = _box(rng, center, half)
    elif kind == "plane_patch":
        pts = _plane(rng, center, half)
    elif kind == "line_scan":
        pts = _scan(rng, center, half, N)
    else:
        parts = rng.choice(4, size=int(rng.integers(2, 4)), replace=False)
        pts = []
        for p in parts:
            sub_half = half * rng.uniform(0.3, 0.6)
            c = center + rng.uniform(-1, 1, size=3) * (half - sub_half)
            pts.append([_sphere(rng, c, sub_half), _box(rng, c, sub_half),
                        _plane(rng, c, sub_half), _scan(rng, c, sub_half, N)][p])
        pts = np.concatenate(pts)
    return _to_cloud(pts, N)


def augment(cloud: PointCloud, rng: np.random.Generator, s: float | None = None) -> PointCloud:
    """Scale by s ~ U(0.5, 1), round and deduplicate."""
    if s is None:
        s = float(rng.uniform(0.5, 1.0))
    pts = np.rint(cloud.points * s).astype(np.int64)
    pts = np.clip(pts, 0, (1 << cloud.N) - 1)
    out = PointCloud(pts, cloud.N).canonical()
    out.original_count = len(out)
    return out


@dataclass
class TrainingSample:
    cloud: PointCloud
    levels: list[CoordSet] = field(init=False)

    def __post_init__(self):
        self.levels = build_pyramid(self.cloud.coordset())

    @property
    def N(self) -> int:
        return self.cloud.N


def read_manifest(path) -> list[dict]:
    """Newline-delimited JSON records {kind, N, seed} (optional ``size``)."""
    recs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            r = json.loads(line)
            rec = {"kind": str(r["kind"]), "N": int(r["N"]), "seed": int(r["seed"])}
        except (ValueError, KeyError, TypeError) as e:
            raise ValueError(f"manifest line {lineno}: {e}") from None
        if "size" in r:
            rec["size"] = float(r["size"])
        recs.append(rec)
    return recs


def write_manifest(path, records: list[dict]):
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def load_dataset(records: list[dict]) -> list[PointCloud]:
    return [synth_cloud(r["kind"], r["N"], r["seed"], r.get("size", 0.75)) for r in records]


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossValue:
    total: float
    bce: float = 0.0
    feature_rate: float = 0.0
    mse: float = 0.0

    def __post_init__(self):
        for v in (self.bce, self.feature_rate, self.mse):
            if v < 0:
                raise ValueError("loss components must be non-negative")


def loss_bce(probs, symbols) -> float:
    """Binary cross-entropy in bits, probabilities clamped to [1e-6, 1-1e-6]."""
    p = np.clip(np.asarray(probs, dtype=np.float64), P_CLAMP, 1 - P_CLAMP)
    o = np.asarray(symbols, dtype=np.float64)
    return float(-(o * np.log2(p) + (1 - o) * np.log2(1 - p)).sum())


def bce_logits(z: np.ndarray, o: np.ndarray) -> tuple[float, np.ndarray]:
    """BCE in bits from logits and d(bits)/dz."""
    z = np.asarray(z, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    nats = np.logaddexp(0.0, z) - o * z
    return float(nats.sum() / LN2), (sigmoid(z) - o) / LN2


def loss_combined(probs, symbols, q, scales, w: float = 1.0) -> LossValue:
    bce = loss_bce(probs, symbols)
    rate = 0.0
    if q is not None and np.size(q):
        bits, _, _ = laplace_rate_and_grads(np.asarray(q, dtype=np.float64), np.asarray(scales, dtype=np.float64))
        rate = float(bits.sum())
    return LossValue(bce + w * rate, bce=bce, feature_rate=rate)


def loss_mse(adjusted, truth) -> float:
    a = np.asarray(adjusted, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(truth, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(t) == 0:
        raise ValueError("loss_mse needs non-empty sets")
    if a.shape != t.shape:
        raise ValueError("adjusted and truth must pair one-to-one")
    return float(((a - t) ** 2).sum(1).mean())


def nearest_truth(points: np.ndarray, truth: np.ndarray) -> np.ndarray:
    _, idx = cKDTree(truth).query(points, k=1)
    return truth[idx]


# ---------------------------------------------------------------------------
# per-sample forward/backward (gradients accumulate into Param.grad)


def _ones(cs: CoordSet) -> SparseTensor:
    return SparseTensor(cs, np.ones((len(cs), 1)), OccupancyRole.POV)


def _occupancy(children: CoordSet, truth: CoordSet) -> np.ndarray:
    return (truth.lookup_keys(children.keys) >= 0).astype(np.float64)


def step_one_stage(net: OneStageSOPA, s: TrainingSample, scales) -> tuple[float, int]:
    total, nsym = 0.0, 0
    for i in scales:
        children, z = net.logits(_ones(s.levels[i - 1]))
        bits, dz = bce_logits(z, _occupancy(children, s.levels[i]))
        net.backward_logits(dz)
        total += bits
        nsym += len(z)
    return total, nsym


def step_multi_stage(net: MultiStageSOPA, s: TrainingSample, scales) -> tuple[float, int]:
    total, nsym = 0.0, 0
    for i in scales:
        truth = s.levels[i]
        prev = _ones(s.levels[i - 1])
        children = prev.coordset.upscaled()

        def teacher(stage, rows, probs):
            return (truth.lookup_keys(children.keys[rows]) >= 0).astype(np.int64)

        _, _, outputs = net.run(prev, teacher, record=True)
        dzs = []
        for _, z, bits in outputs:
            b, dz = bce_logits(z, bits)
            total += b
            nsym += len(z)
            dzs.append(dz)
        net.backward_logits(dzs)
    return total, nsym


def step_slne(enc: SLNEEncoder, dec: SLNEDecoder, s: TrainingSample, scales, w: float,
              rng: np.random.Generator, drop: float = 0.25) -> tuple[float, float, int]:
    """One cloud through encoder, feature decoder and SOPA.

    With probability ``drop`` (and always below scale 2) a scale is coded
    with zeroed features, since the encoder may skip side information there.
    """
    bce_total, rate_total, nsym = 0.0, 0.0, 0
    for i in scales:
        if i < 2 or rng.random() < drop:
            children, z = dec.sopa.logits(dec.zero_features(s.levels[i - 1]))
            bits, dz = bce_logits(z, _occupancy(children, s.levels[i]))
            dec.sopa.backward_logits(dz)
            bce_total += bits
            nsym += len(z)
            continue
        y = enc.analysis(_ones(s.levels[i]))
        yt = y.feats + rng.uniform(-0.5, 0.5, y.feats.shape)
        b = dec.scales()
        rbits, dr_dy, dr_db = laplace_rate_and_grads(yt, b[None, :])
        x = dec.features(y.with_feats(yt), s.levels[i - 1])
        children, z = dec.sopa.logits(x)
        bits, dz = bce_logits(z, _occupancy(children, s.levels[i]))
        gx = dec.sopa.backward_logits(dz)
        gq = dec.backward_features(gx) + w * dr_dy
        dec.log_scale.grad += w * (dr_db.sum(0) * np.exp(dec.log_scale.value))
        enc.backward(gq)
        bce_total += bits
        rate_total += float(rbits.sum())
        nsym += len(z)
    return bce_total, rate_total, nsym


def position_targets(s: TrainingSample, m: int) -> tuple[CoordSet, np.ndarray]:
    """Scale-m POVs and, per POV, the nearest scale-N point to its block centre (block units)."""
    coarse = s.levels[m]
    block = float(1 << (s.N - m))
    centre = (np.asarray(coarse.coords, dtype=np.float64) + 0.5) * block - 0.5
    tgt = nearest_truth(centre, np.asarray(s.levels[s.N].coords, dtype=np.float64))
    return coarse, (tgt - np.asarray(coarse.coords) * block) / block


def step_position(net: SOPAPosition, s: TrainingSample, m: int) -> tuple[float, int]:
    coarse, target = position_targets(s, m)
    pred = net.raw(_ones(coarse))
    diff = pred - target
    net.backward(2.0 * diff)
    return float((diff * diff).sum()), len(coarse)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class Schedule:
    epochs: int = 5
    batch: int = 8
    lr_start: float = 8e-4
    lr_end: float = 2e-5
    seed: int = 0
    min_scale: int = 1          # lowest coded scale used for occupancy losses
    position_depths: tuple[int, ...] = (2, 3, 4)
    augment: bool = True


class TrainingDiverged(RuntimeError):
    pass


def make_networks(arch: str, seed: int = 0, base: OneStageSOPA | None = None,
                  **config) -> dict[str, Network]:
    """Freshly initialised networks for a training arch ('slne' yields encoder and decoder).

    ``base`` warm-starts the SLNE decoder's SOPA from a trained plain one.
    """
    if arch == "slne":
        if base is not None:
            config = {"k": base.k, "C": base.C, **config}
        dec = build_network("slne_decoder", seed=seed, **config)
        if base is not None:
            dec.warm_start(base)
        return {"slne_encoder": build_network("slne_encoder", seed=seed, **config), "slne_decoder": dec}
    if arch not in TRAIN_ARCHS:
        raise ValueError(f"unknown arch {arch!r}; expected one of {', '.join(TRAIN_ARCHS)}")
    return {arch: build_network(arch, seed=seed, **config)}


def train(arch: str, dataset: list[PointCloud], schedule: Schedule | None = None,
          nets: dict[str, Network] | None = None, log_path=None, config: dict | None = None,
          progress=None) -> dict[str, Network]:
    """Train ``arch`` on ``dataset``; returns the trained networks keyed by arch id.

    Each optimiser step averages gradients over ``batch`` clouds.  The loss
    per cloud is bits per coded symbol (or squared block-unit offset error
    per point for the position network), so clouds of any size weigh equally.
    """
    sch = schedule or Schedule()
    nets = nets or make_networks(arch, sch.seed, **(config or {}))
    params = [p for n in nets.values() for p in n.parameters()]
    opt = Adam(params, lr=sch.lr_start)
    rng = np.random.default_rng(sch.seed)
    steps_per_epoch = math.ceil(len(dataset) / sch.batch) if dataset else 0
    total_steps = sch.epochs * steps_per_epoch
    log_rows = []
    step = 0
    for epoch in range(sch.epochs):
        order = rng.permutation(len(dataset))
        sums = {"bce": 0.0, "feature_rate": 0.0, "mse": 0.0, "symbols": 0}
        lr = sch.lr_start
        for b0 in range(0, len(order), sch.batch):
            idx = order[b0:b0 + sch.batch]
            for p in params:
                p.grad[...] = 0.0
            w = min(1.0, step / max(1.0, total_steps / 3.0))
            for j in idx:
                cloud = augment(dataset[j], rng) if sch.augment else dataset[j]
                s = TrainingSample(cloud)
                scales = range(max(1, sch.min_scale), s.N + 1)
                before = [p.grad.copy() for p in params]
                if arch == "one_stage_sopa":
                    bits, n = step_one_stage(nets[arch], s, scales)
                    sums["bce"] += bits
                elif arch.startswith("multistage"):
                    bits, n = step_multi_stage(nets[arch], s, scales)
                    sums["bce"] += bits
                elif arch == "slne":
                    bits, rate, n = step_slne(nets["slne_encoder"], nets["slne_decoder"], s,
                                              scales, w, rng)
                    sums["bce"] += bits
                    sums["feature_rate"] += rate
                else:
                    depth = int(rng.choice(sch.position_depths))
                    m = max(1, s.N - depth)
                    err, n = step_position(nets[arch], s, m)
                    sums["mse"] += err
                if n == 0:
                    for p, g in zip(params, before):
                        p.grad[...] = g
                    continue
                sums["symbols"] += n
                # rescale this sample's contribution to a per-symbol mean
                for p, g in zip(params, before):
                    p.grad[...] = g + (p.grad - g) / n
            for p in params:
                p.grad /= max(len(idx), 1)
                if not np.all(np.isfinite(p.grad)):
                    raise TrainingDiverged(f"non-finite gradient at epoch {epoch}, step {step}")
            lr = cosine_lr(step, total_steps, sch.lr_start, sch.lr_end)
            opt.step(lr)
            step += 1
        nsym = max(sums["symbols"], 1)
        row = {"epoch": epoch, "bce": sums["bce"] / nsym, "feature_rate": sums["feature_rate"] / nsym,
               "mse": sums["mse"] / nsym, "lr": lr}
        row["total"] = row["bce"] + row["feature_rate"] + row["mse"]
        if not math.isfinite(row["total"]):
            raise TrainingDiverged(f"loss became {row['total']} at epoch {epoch}")
        log_rows.append(row)
        if progress:
            progress(row)
    if log_path is not None:
        write_log(log_path, log_rows)
    train.last_log = log_rows
    return nets


train.last_log = []


def write_log(path, rows: list[dict]):
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=["epoch", "total", "bce", "feature_rate", "mse", "lr"])
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# evaluation helpers


def heldout_bits(nets: dict[str, Network], arch: str, clouds: list[PointCloud]) -> float:
    """Ideal total bits per point (occupancy + features) over ``clouds`` without training noise."""
    from .codec import CodecConfig, Mode, encode
    total = 0.0
    count = 0
    models = dict(nets)
    for c in clouds:
        bs = encode(c, CodecConfig(Mode.LOSSLESS, c.N, 0, arch), models)
        total += 8 * len(bs.to_bytes())
        count += c.original_count
    return total / count
