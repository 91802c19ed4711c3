"""Occupancy-probability and offset networks built on the sparse conv engine.

Every network exposes ``forward``-style methods that record what the
matching ``backward`` needs, so the same code path serves inference,
coding and training.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .nn.layers import DFA, OOL, Module, Param, ReLU, SConv, SConvDown, Sequential, TSConvUp, sigmoid
from .sparse_tensor import CoordSet, GroupingArrangement, OccupancyRole, SparseTensor

ARCH_IDS = (
    "one_stage_sopa",
    "multistage_sopa_3",
    "multistage_sopa_8",
    "slne_encoder",
    "slne_decoder",
    "sopa_position",
)

# Resolver for multi-stage coding: (stage index, candidate child rows, probabilities) -> bits.
Resolver = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class StagePrediction:
    coords: np.ndarray
    probs: np.ndarray
    rows: np.ndarray | None = None

    def __post_init__(self):
        if len(self.coords) != len(self.probs):
            raise ValueError("coords and probs must align")
        if not np.all(np.isfinite(self.probs)):
            raise ValueError("non-finite probability")


@dataclass
class OffsetPrediction:
    coords: np.ndarray
    offsets: np.ndarray


class Network(Module):
    """Base for serialisable networks: carries ``arch_id`` and its build config."""

    arch_id = ""

    def __init__(self, config: dict):
        super().__init__()
        object.__setattr__(self, "config", dict(config))

    @property
    def k(self) -> int:
        return self.config["k"]

    @property
    def C(self) -> int:
        return self.config["C"]


def _stem(cin: int, C: int, k: int, rng) -> Sequential:
    return Sequential(SConv(cin, C, k, rng), ReLU())


class OneStageSOPA(Network):
    """stem -> DFA (scale i-1) -> VSL up -> DFA (scale i) -> OOL; one probability per child."""

    arch_id = "one_stage_sopa"

    def __init__(self, k: int = 3, C: int = 16, in_channels: int = 1, units: int = 3, seed: int = 0,
                 zero_head: bool = True):
        super().__init__(dict(k=k, C=C, in_channels=in_channels, units=units, seed=seed, zero_head=zero_head))
        rng = np.random.default_rng(seed)
        self.stem = _stem(in_channels, C, k, rng)
        self.dfa_low = DFA(C, k, units, rng)
        self.up = Sequential(TSConvUp(C, C, rng), ReLU())
        self.dfa_high = DFA(C, k, units, rng)
        self.ool = OOL(C, k, "probability", rng, zero_head)

    def logits(self, prev: SparseTensor) -> tuple[CoordSet, np.ndarray]:
        h = self.stem.forward(prev)
        h = self.dfa_low.forward(h)
        h = self.up.forward(h)
        h = self.dfa_high.forward(h)
        z = self.ool.forward_raw(h)
        return z.coordset, z.feats[:, 0]

    def backward_logits(self, dz: np.ndarray) -> np.ndarray:
        g = self.ool.backward_raw(dz.reshape(-1, 1))
        g = self.dfa_high.backward(g)
        g = self.up.backward(g)
        g = self.dfa_low.backward(g)
        return self.stem.backward(g)

    def predict(self, prev: SparseTensor) -> StagePrediction:
        cs, z = self.logits(prev)
        return StagePrediction(cs.coords, sigmoid(z))


class MultiStageSOPA(Network):
    """Shared backbone (stem, DFA, VSL up) plus one DFA+OOL per coding stage.

    At stage n the working tensor holds the POVs decided in earlier stages
    (with their latest DFA features) and the stage-n candidates (with
    backbone features).  Non-occupied candidates are dropped right after
    their stage is resolved.
    """

    def __init__(self, stages: int = 8, k: int = 3, C: int = 16, in_channels: int = 1,
                 units: int = 3, seed: int = 0, zero_head: bool = True):
        if stages not in (3, 8):
            raise ValueError("multi-stage SOPA supports 3 or 8 stages")
        super().__init__(dict(stages=stages, k=k, C=C, in_channels=in_channels, units=units, seed=seed,
                              zero_head=zero_head))
        rng = np.random.default_rng(seed)
        self.arrangement = GroupingArrangement.of("three_stage" if stages == 3 else "eight_stage")
        self.stem = _stem(in_channels, C, k, rng)
        self.dfa = DFA(C, k, units, rng)
        self.up = Sequential(TSConvUp(C, C, rng), ReLU())
        self.stage_dfa = Sequential(*[DFA(C, k, units, rng) for _ in range(stages)])
        self.stage_ool = Sequential(*[OOL(C, k, "probability", rng, zero_head) for _ in range(stages)])
        self._trace = None

    @property
    def arch_id(self) -> str:  # type: ignore[override]
        return f"multistage_sopa_{self.config['stages']}"

    def run(self, prev: SparseTensor, resolve: Resolver, record: bool = False):
        """Run all stages; returns (children CoordSet, occupied child rows, per-stage outputs).

        Per-stage outputs are (candidate rows, logits, bits).
        """
        h = self.stem.forward(prev)
        h = self.dfa.forward(h)
        up = self.up.forward(h)
        children = up.coordset
        H = up.feats
        stage_idx = self.arrangement.stage_of_rank()[children.keys & 7]
        surv_rows = np.zeros(0, dtype=np.int64)
        surv_feats = np.zeros((0, self.C))
        outputs = []
        trace = []
        for s in range(self.arrangement.num_stages):
            cand = np.flatnonzero(stage_idx == s)
            work = np.union1d(surv_rows, cand)
            is_surv = np.zeros(work.size, dtype=bool)
            surv_pos = np.searchsorted(work, surv_rows)
            is_surv[surv_pos] = True
            cand_pos = np.flatnonzero(~is_surv)
            feats = np.empty((work.size, self.C))
            feats[surv_pos] = surv_feats
            feats[cand_pos] = H[work[cand_pos]]
            wt = SparseTensor(CoordSet.from_keys(children.keys[work], children.scale), feats,
                              OccupancyRole.MP_POV)
            f = self.stage_dfa.layers[s].forward(wt)
            z = self.stage_ool.layers[s].forward_raw(f).feats[:, 0]
            zc = z[cand_pos]
            bits = np.asarray(resolve(s, cand, sigmoid(zc)), dtype=np.int64)
            if bits.shape != cand.shape:
                raise ValueError("resolver returned the wrong number of bits")
            keep = is_surv.copy()
            keep[cand_pos] = bits.astype(bool)
            outputs.append((cand, zc, bits))
            if record:
                trace.append((work.size, surv_pos, cand_pos, work[cand_pos], keep))
            surv_rows = work[keep]
            surv_feats = f.feats[keep]
        if record:
            self._trace = (trace, H.shape)
        return children, surv_rows, outputs

    def backward_logits(self, dzs: list[np.ndarray]) -> np.ndarray:
        """Backprop per-stage candidate-logit gradients; returns d(input features)."""
        trace, hshape = self._trace
        dH = np.zeros(hshape)
        d_surv = None  # gradient w.r.t. survivor features leaving the current stage
        for s in range(len(trace) - 1, -1, -1):
            nwork, surv_pos, cand_pos, cand_rows, keep = trace[s]
            dz = np.zeros((nwork, 1))
            dz[cand_pos, 0] = dzs[s]
            df = self.stage_ool.layers[s].backward_raw(dz)
            if d_surv is not None:
                df[keep] += d_surv
            dw = self.stage_dfa.layers[s].backward(df)
            dH[cand_rows] += dw[cand_pos]
            d_surv = dw[surv_pos]
        g = self.up.backward(dH)
        g = self.dfa.backward(g)
        return self.stem.backward(g)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


class SLNEEncoder(Network):
    """DFA -> VSL down -> DFA -> VSL down -> DFA -> 1^3 projection -> quantise.

    Consumes the POVs at scale i and emits latents attached to the POVs at
    scale i-2.
    """

    arch_id = "slne_encoder"

    def __init__(self, k: int = 3, C: int = 16, latent: int = 8, units: int = 3, seed: int = 0):
        super().__init__(dict(k=k, C=C, latent=latent, units=units, seed=seed))
        rng = np.random.default_rng(seed + 101)
        self.stem = _stem(1, C, k, rng)
        self.dfa0 = DFA(C, k, units, rng)
        self.down0 = Sequential(SConvDown(C, C, rng), ReLU())
        self.dfa1 = DFA(C, k, units, rng)
        self.down1 = Sequential(SConvDown(C, C, rng), ReLU())
        self.dfa2 = DFA(C, k, units, rng)
        self.proj = SConv(C, latent, 1, rng)

    def analysis(self, pov: SparseTensor) -> SparseTensor:
        """Unquantised latents at scale i-2."""
        h = self.stem.forward(pov.with_feats(np.ones((len(pov), 1))))
        h = self.dfa0.forward(h)
        h = self.down0.forward(h)
        h = self.dfa1.forward(h)
        h = self.down1.forward(h)
        h = self.dfa2.forward(h)
        return self.proj.forward(h)

    def backward(self, grad):
        g = self.proj.backward(grad)
        g = self.dfa2.backward(g)
        g = self.down1.backward(g)
        g = self.dfa1.backward(g)
        g = self.down0.backward(g)
        g = self.dfa0.backward(g)
        return self.stem.backward(g)

    def encode(self, pov: SparseTensor, training: bool = False,
               rng: np.random.Generator | None = None) -> SparseTensor:
        y = self.analysis(pov)
        if training:
            rng = rng or np.random.default_rng()
            return y.with_feats(y.feats + rng.uniform(-0.5, 0.5, y.feats.shape))
        return y.with_feats(round_half_away(y.feats))


class SLNEDecoder(Network):
    """Feature upscaler (VSL up + DFA), Laplace scales for the latents, and the SOPA fed by them.

    The SOPA sees a constant occupancy channel followed by the C decoded
    feature channels, so zeroed features reduce it to a plain one-stage model.
    """

    arch_id = "slne_decoder"

    def __init__(self, k: int = 3, C: int = 16, latent: int = 8, units: int = 3, seed: int = 0,
                 zero_head: bool = True):
        super().__init__(dict(k=k, C=C, latent=latent, units=units, seed=seed, zero_head=zero_head))
        rng = np.random.default_rng(seed + 202)
        self.log_scale = Param(np.zeros(latent))
        self.up = Sequential(TSConvUp(latent, C, rng), ReLU())
        self.dfa = DFA(C, k, units, rng)
        self.sopa = OneStageSOPA(k=k, C=C, in_channels=C + 1, units=units, seed=seed + 303, zero_head=zero_head)
        self._rows = None

    MIN_SCALE = 0.02

    def scales(self) -> np.ndarray:
        return self.MIN_SCALE + np.exp(self.log_scale.value)

    def features(self, q: SparseTensor, target: CoordSet) -> SparseTensor:
        """Upscale latents at scale i-2 onto the decoded POVs ``target`` at scale i-1."""
        u = self.up.forward(q)
        rows = u.coordset.lookup_keys(target.keys)
        if np.any(rows < 0):
            raise ValueError("target voxels are not children of the latent voxels")
        self._rows = (rows, len(u))
        h = SparseTensor(target, u.feats[rows], OccupancyRole.POV)
        f = self.dfa.forward(h).feats
        return SparseTensor(target, np.hstack([np.ones((len(target), 1)), f]), OccupancyRole.POV)

    def backward_features(self, grad: np.ndarray) -> np.ndarray:
        g = self.dfa.backward(grad[:, 1:])
        rows, n = self._rows
        gu = np.zeros((n, g.shape[1]))
        gu[rows] = g
        return self.up.backward(gu)

    def zero_features(self, target: CoordSet) -> SparseTensor:
        f = np.zeros((len(target), self.C + 1))
        f[:, 0] = 1.0
        return SparseTensor(target, f, OccupancyRole.POV)

    def warm_start(self, base: OneStageSOPA):
        """Copy a trained plain SOPA; feature-channel weights start at zero."""
        if (base.k, base.C) != (self.k, self.C):
            raise ValueError("warm start needs matching k and C")
        for (name, p), (_, q) in zip(self.sopa.named_parameters(), base.named_parameters()):
            if p.value.shape == q.value.shape:
                p.value[...] = q.value
            else:  # stem conv: (K, C+1, C) <- (K, 1, C)
                p.value[...] = 0.0
                p.value[:, :1] = q.value


class SOPAPosition(Network):
    """DFA + offset OOL at scale m.  Offsets are emitted in units of the 2^(N-m) block size."""

    arch_id = "sopa_position"

    def __init__(self, k: int = 5, C: int = 16, units: int = 3, seed: int = 0, zero_head: bool = True):
        super().__init__(dict(k=k, C=C, units=units, seed=seed, zero_head=zero_head))
        rng = np.random.default_rng(seed + 404)
        self.stem = _stem(1, C, k, rng)
        self.dfa = DFA(C, k, units, rng)
        self.ool = OOL(C, k, "offset", rng, zero_head)

    def raw(self, coarse: SparseTensor) -> np.ndarray:
        h = self.stem.forward(coarse.with_feats(np.ones((len(coarse), 1))))
        h = self.dfa.forward(h)
        return self.ool.forward(h).feats

    def backward(self, grad):
        g = self.ool.backward(grad)
        g = self.dfa.backward(g)
        return self.stem.backward(g)

    def predict(self, coarse: SparseTensor, N: int) -> OffsetPrediction:
        if N <= coarse.scale:
            raise ValueError("target precision must exceed the coarse scale")
        block = float(1 << (N - coarse.scale))
        return OffsetPrediction(coarse.coords, self.raw(coarse) * block)


def build_network(arch_id: str, **config) -> Network:
    config = dict(config)
    if arch_id == "one_stage_sopa":
        return OneStageSOPA(**config)
    if arch_id in ("multistage_sopa_3", "multistage_sopa_8"):
        config["stages"] = int(arch_id.rsplit("_", 1)[1])
        return MultiStageSOPA(**config)
    if arch_id == "slne_encoder":
        config.pop("zero_head", None)  # no output head
        return SLNEEncoder(**config)
    if arch_id == "slne_decoder":
        return SLNEDecoder(**config)
    if arch_id == "sopa_position":
        return SOPAPosition(**config)
    raise ValueError(f"unknown arch {arch_id!r}; expected one of {', '.join(ARCH_IDS)}")


# ---------------------------------------------------------------------------
# thin functional wrappers


def sopa_one_stage(prev: SparseTensor, net: OneStageSOPA) -> StagePrediction:
    return net.predict(prev)


def sopa_multi_stage(prev: SparseTensor, resolve: Resolver, net: MultiStageSOPA):
    """Returns (list of per-stage StagePredictions, surviving POV CoordSet)."""
    children, surv_rows, outputs = net.run(prev, resolve)
    preds = [StagePrediction(children.coords[c], sigmoid(z), rows=c) for c, z, _ in outputs]
    return preds, CoordSet.from_keys(children.keys[np.sort(surv_rows)], children.scale)


def ground_truth_resolver(children_keys: np.ndarray, truth: CoordSet) -> Resolver:
    def resolve(stage, rows, probs):
        return (truth.lookup_keys(children_keys[rows]) >= 0).astype(np.int64)
    return resolve


def lossy_threshold(pred: StagePrediction, k: int) -> np.ndarray:
    """Indices (into pred) of the k most probable candidates; ties go to the earlier Morton position."""
    n = len(pred.probs)
    if not 0 <= k <= n:
        raise ValueError(f"k={k} outside [0, {n}]")
    order = np.lexsort((np.arange(n), -np.asarray(pred.probs)))
    return np.sort(order[:k])


def reconstruct(coords: np.ndarray, offsets: np.ndarray, N: int, m: int) -> np.ndarray:
    """Scale-m coordinates plus rounded offsets to precision N (duplicates retained)."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    offs = round_half_away(np.asarray(offsets, dtype=np.float64).reshape(-1, 3)).astype(np.int64)
    out = coords * (1 << (N - m)) + offs
    return np.clip(out, 0, (1 << N) - 1)


def sopa_position(coarse: SparseTensor, net: SOPAPosition, N: int) -> np.ndarray:
    pred = net.predict(coarse, N)
    return reconstruct(pred.coords, pred.offsets, N, coarse.scale)
