"""Acceptance criteria 1-10, one test each.

Every test prints a single ``criterion N: PASS|FAIL ...`` line.  Trained
models come from a session fixture that caches its model files (keyed by
the training configuration and the package sources), so only the first
run pays for training.  Set SPCG_ACCEPT_CACHE to move the cache.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import dense_down2, dense_sconv, dense_up2, grad_check
from spcg.codec import LOSSLESS_ARCHS, ChunkKind, CodecConfig, Mode, decode, encode, naive_truncate
from spcg.metrics import d1_mse, d1_psnr
from spcg.modelfile import load_model, save_model, to_bytes
from spcg.models import build_network
from spcg.nn import DFA, OOL, IRNUnit, ReLU, SConv, SConvDown, Sigmoid, TSConvUp
from spcg.sparse_tensor import (
    CoordSet,
    GroupingArrangement,
    SparseTensor,
    build_pyramid,
    coords_to_set,
    group_of,
)
from spcg.training import KINDS, Schedule, make_networks, synth_cloud, train

ROOT = Path(__file__).resolve().parents[1]
DENSE_KINDS = ("sphere_shell", "box_surface", "plane_patch", "union")

# desk-scale training setup shared by criteria 1, 2 and 6-9
TRAIN = {
    "train_clouds": 64, "train_N": 6, "train_size": (0.25, 0.5),
    "scan_clouds": 48, "scan_N": 7,
    "C": 8, "k": 3, "units": 3, "latent": 4,
    "lr": 3e-3, "batch": 8,
    "epochs": {"one_stage_sopa": 40, "multistage_sopa_8": 40, "multistage_sopa_3": 10, "slne": 20, "sopa_position": 30},
    "slne_lr": 3e-3,
}
TRAIN_BUDGET_S = 30 * 60


def say(capsys, n: int, ok: bool, detail: str):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def dense_set(n, offset, N, lo, hi):
    return [synth_cloud(DENSE_KINDS[i % 4], N, offset + i,
                        float(np.random.default_rng(offset + i).uniform(lo, hi))) for i in range(n)]


def _cache_dir() -> Path:
    h = hashlib.sha256(json.dumps(TRAIN, sort_keys=True).encode())
    for f in sorted((ROOT / "src" / "spcg").rglob("*.py")):
        h.update(f.read_bytes())
    base = Path(os.environ.get("SPCG_ACCEPT_CACHE", ROOT / ".acceptance_cache"))
    return base / h.hexdigest()[:16]


def _train_all(out: Path) -> dict:
    T = TRAIN
    cfg = {"k": T["k"], "C": T["C"], "units": T["units"]}
    dense = dense_set(T["train_clouds"], 0, T["train_N"], *T["train_size"])
    scans = [synth_cloud("line_scan", T["scan_N"], 500 + i, 0.75) for i in range(T["scan_clouds"])]

    def sched(arch, lr=T["lr"]):
        return Schedule(epochs=T["epochs"][arch], batch=T["batch"], seed=0, lr_start=lr, lr_end=lr / 40)

    seconds = {}
    nets = {}
    for arch in ("one_stage_sopa", "multistage_sopa_8", "multistage_sopa_3"):
        t0 = time.perf_counter()
        nets.update(train(arch, dense, sched(arch), config=cfg))
        seconds[arch] = time.perf_counter() - t0
    t0 = time.perf_counter()
    warm = make_networks("slne", 0, base=nets["one_stage_sopa"], units=T["units"], latent=T["latent"])
    nets.update(train("slne", dense, sched("slne", T["slne_lr"]), nets=warm))
    seconds["slne"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    pos_cfg = dict(cfg, k=5)
    nets.update(train("sopa_position", scans, sched("sopa_position"), config=pos_cfg))
    seconds["sopa_position"] = time.perf_counter() - t0
    out.mkdir(parents=True, exist_ok=True)
    for arch_id, net in nets.items():
        save_model(net, out / f"{arch_id}.spnw")
    (out / "meta.json").write_text(json.dumps({"seconds": seconds}, indent=1))
    return nets


@pytest.fixture(scope="session")
def trained():
    d = _cache_dir()
    if not (d / "meta.json").exists():
        _train_all(d)
    models = {p.stem: load_model(p) for p in sorted(d.glob("*.spnw"))}
    meta = json.loads((d / "meta.json").read_text())
    return models, meta


def random_models(seed=7):
    cfg = dict(k=3, C=4, units=1, seed=seed, zero_head=False)
    models = {a: build_network(a, **cfg) for a in ("one_stage_sopa", "multistage_sopa_3", "multistage_sopa_8")}
    models["slne_encoder"] = build_network("slne_encoder", latent=2, **cfg)
    models["slne_decoder"] = build_network("slne_decoder", latent=2, **cfg)
    return models


def roundtrip_clouds(n=100):
    rng = np.random.default_rng(2024)
    clouds = []
    for i in range(n):
        N = int(rng.integers(6, 11))
        kind = KINDS[i % len(KINDS)]
        # object extent 12..32 voxels whatever N is, so N=10 stays cheap
        size = float(rng.uniform(12, 32)) / (1 << N)
        clouds.append(synth_cloud(kind, N, 1000 + i, size))
    return clouds


@pytest.fixture(scope="session")
def roundtrips(trained):
    """Criteria 1 and 2 share the same 200 encode/decode runs."""
    models, _ = trained
    rand = random_models()
    clouds = roundtrip_clouds()
    t0 = time.perf_counter()
    results = []
    for i, c in enumerate(clouds):
        arch = LOSSLESS_ARCHS[i % len(LOSSLESS_ARCHS)]
        for label, ms in (("trained", models), ("random", rand)):
            bs = encode(c, CodecConfig(Mode.LOSSLESS, c.N, lossless_arch=arch), ms)
            out = decode(bs.to_bytes(), ms)
            results.append((label, arch, c, bs, out))
    return results, time.perf_counter() - t0


def test_criterion_01_lossless_roundtrip(roundtrips, capsys):
    results, seconds = roundtrips
    bad = [(lbl, arch, c.N) for lbl, arch, c, _, out in results if not out.same_points(c)]
    ok = not bad and seconds <= 300 and len(results) == 200
    say(capsys, 1, ok, f"{len(results) - len(bad)}/{len(results)} exact round trips "
                       f"(trained + random models), {seconds:.0f}s (budget 300s)")


def test_criterion_02_rate_matches_entropy(roundtrips, capsys):
    results, _ = roundtrips
    worst = 0.0
    scales = 0
    for _, _, _, bs, _ in results:
        for i, (_, ideal) in bs.stats.items():
            payload = 8 * sum(len(ch.payload) for ch in bs.chunks if ch.scale == i)
            worst = max(worst, abs(payload - ideal))
            scales += 1
    say(capsys, 2, worst <= 64, f"max |coded - ideal| = {worst:.1f} bits over {scales} scales (limit 64)")


def test_criterion_03_sparse_tensor_invariants(capsys):
    rng = np.random.default_rng(3)
    arrangements = [GroupingArrangement.of(v) for v in ("one_stage", "three_stage", "eight_stage")]
    failures = 0
    n = 10_000
    for t in range(n):
        scale = int(rng.integers(1, 9))
        pts = rng.integers(0, 1 << scale, size=(int(rng.integers(1, 60)), 3))
        cs = CoordSet(pts, scale)
        ok = len(coords_to_set(cs.coords)) == len(cs) and bool(np.all(np.diff(cs.keys) > 0))
        ok &= CoordSet(pts[rng.permutation(len(pts))], scale) == cs
        up = cs.downscaled().upscaled()
        ok &= coords_to_set(cs.coords) <= coords_to_set(up.coords)
        ok &= len(up) == 8 * len(cs.downscaled())
        # every parent's 8 children split over the stages exactly as the arrangement lists them
        arr = arrangements[t % 3]
        stage = arr.stage_of_rank()[up.keys & 7]
        per_parent = np.bincount(stage.reshape(-1, 8)[0], minlength=arr.num_stages)
        ok &= np.array_equal(per_parent, [len(st) for st in arr.stages])
        ok &= all(np.array_equal(np.sort(stage.reshape(-1, 8)[j]), np.sort(stage[:8]))
                  for j in range(len(stage) // 8))
        c0 = tuple(int(v) & 1 for v in up.coords[0])
        ok &= group_of(c0, arr)[1] == stage[0] + 1
        failures += not ok
    say(capsys, 3, failures == 0, f"{n - failures}/{n} randomized instances hold superset, partition and order")


def test_criterion_04_convolution_oracle(capsys):
    rng = np.random.default_rng(4)
    worst = 0.0
    cases = 200
    for t in range(cases):
        scale = int(rng.integers(1, 5))  # grids up to 16^3
        n = int(rng.integers(1, min(8 ** scale, 80) + 1))
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        cs = CoordSet(rng.integers(0, 1 << scale, size=(n, 3)), scale)
        t_in = SparseTensor(cs, rng.normal(size=(len(cs), cin)))
        kind = t % 4
        if kind < 2 or scale == 1 and kind == 2:
            k = (1, 3, 5)[int(rng.integers(0, 3))]
            conv = SConv(cin, cout, k, rng)
            conv.bias.value[:] = rng.normal(size=cout)
            ref = dense_sconv(t_in, conv.weight.value, conv.bias.value, k)
            worst = max(worst, float(np.max(np.abs(conv.forward(t_in).feats - ref))))
        elif kind == 2:
            conv = SConvDown(cin, cout, rng)
            conv.bias.value[:] = rng.normal(size=cout)
            out = conv.forward(t_in)
            ref = dense_down2(t_in, conv.weight.value, conv.bias.value)
            worst = max(worst, max(float(np.max(np.abs(f - ref[c]))) for c, f in out.items()))
        else:
            conv = TSConvUp(cin, cout, rng)
            conv.bias.value[:] = rng.normal(size=cout)
            out = conv.forward(t_in)
            ref = dense_up2(t_in, conv.weight.value, conv.bias.value)
            worst = max(worst, max(float(np.max(np.abs(f - ref[c]))) for c, f in out.items()))
    say(capsys, 4, worst <= 1e-12, f"{cases} cases, max abs diff {worst:.2e} (limit 1e-12)")


LAYERS = {
    "sconv_k1": lambda rng: (SConv(3, 2, 1, rng), 3),
    "sconv_k3": lambda rng: (SConv(3, 2, 3, rng), 3),
    "sconv_k5": lambda rng: (SConv(2, 2, 5, rng), 2),
    "vsl_down": lambda rng: (SConvDown(3, 2, rng), 3),
    "vsl_up": lambda rng: (TSConvUp(3, 2, rng), 3),
    "relu": lambda rng: (ReLU(), 3),
    "sigmoid": lambda rng: (Sigmoid(), 3),
    "irn": lambda rng: (IRNUnit(4, 3, rng), 4),
    "dfa": lambda rng: (DFA(4, 3, 2, rng), 4),
    "ool_probability": lambda rng: (OOL(4, 3, "probability", rng, zero_head=False), 4),
    "ool_offset": lambda rng: (OOL(4, 3, "offset", rng, zero_head=False), 4),
}


def test_criterion_05_gradient_check(capsys):
    rng = np.random.default_rng(5)
    draws = 50
    worst = {}
    for name, make in LAYERS.items():
        w = 0.0
        for _ in range(draws):
            module, cin = make(rng)
            for p in module.parameters():
                if p.value.ndim == 1:
                    p.value[:] = rng.normal(scale=0.3, size=p.value.shape)
            cs = CoordSet(rng.integers(0, 8, size=(int(rng.integers(5, 30)), 3)), 3)
            x = SparseTensor(cs, rng.normal(size=(len(cs), cin)))
            w = max(w, grad_check(module, x, rng, n_checks=4))
        worst[name] = w
    top = max(worst.values())
    say(capsys, 5, top <= 1e-4, f"{len(LAYERS)} layer kinds x {draws} draws, worst rel err {top:.1e} "
                                f"({max(worst, key=worst.get)}; limit 1e-4)")


@pytest.fixture(scope="session")
def heldout():
    return dense_set(8, 20000, 7, 0.3, 0.6)


def _bpp(models, arch, clouds):
    bits = sum(8 * len(encode(c, CodecConfig(Mode.LOSSLESS, c.N, lossless_arch=arch), models).to_bytes())
               for c in clouds)
    return bits / sum(c.original_count for c in clouds)


def _baseline_bpp(clouds):
    cand = sum(sum(8 * len(p) for p in build_pyramid(c.coordset())[:-1]) for c in clouds)
    return cand / sum(c.original_count for c in clouds)


def test_criterion_06_training_efficacy(trained, heldout, capsys):
    models, meta = trained
    one = _bpp(models, "one_stage_sopa", heldout)
    eight = _bpp(models, "multistage_sopa_8", heldout)
    base = _baseline_bpp(heldout)
    seconds = sum(meta["seconds"].values())
    ok = eight <= 0.85 * one and one <= 0.7 * base and eight <= 0.7 * base and seconds <= TRAIN_BUDGET_S
    say(capsys, 6, ok, f"8-stage {eight:.3f} bpp / one-stage {one:.3f} bpp = {eight / one:.3f} (need <= 0.85); "
                       f"p=0.5 baseline {base:.3f} bpp (one {one / base:.2f}, eight {eight / base:.2f}, "
                       f"need <= 0.70); training {seconds:.0f}s")


def test_criterion_07_slne_efficacy(trained, heldout, capsys):
    models, _ = trained
    one = _bpp(models, "one_stage_sopa", heldout)
    streams = [encode(c, CodecConfig(Mode.LOSSLESS, c.N, lossless_arch="slne"), models) for c in heldout]
    slne = sum(8 * len(bs.to_bytes()) for bs in streams) / sum(c.original_count for c in heldout)
    # a gain with no FEATURE chunk sent would only reflect the extra SOPA training
    used = sum(ch.kind == ChunkKind.FEATURE for bs in streams for ch in bs.chunks)
    coded = sum(c.N - 1 for c in heldout)
    say(capsys, 7, slne < one and used > 0,
        f"SLNE one-stage {slne:.4f} bpp vs plain one-stage {one:.4f} bpp ({100 * (slne / one - 1):+.2f}%); "
        f"side information sent at {used}/{coded} scales")


def test_criterion_08_lossy_rd(trained, heldout, capsys):
    models, _ = trained
    rows = []
    ok = True
    for c in heldout[:4]:
        N = c.N
        pts = []
        for m in (N - 1, N - 2, N - 3):
            bs = encode(c, CodecConfig(Mode.LOSSY_DENSE, N, m), models)
            rec = decode(bs.to_bytes(), models)
            bpp = 8 * len(bs.to_bytes()) / c.original_count
            psnr = d1_psnr(c, rec)
            naive = d1_psnr(c, naive_truncate(c, m))
            pts.append((m, bpp, psnr, naive))
            ok &= len(rec) == len(c) and psnr > naive
        bpps = [p[1] for p in pts]
        psnrs = [p[2] for p in pts]
        ok &= all(b < a for a, b in zip(bpps, bpps[1:]))
        ok &= all(b <= a for a, b in zip(psnrs, psnrs[1:]))
        rows.append(pts)
    detail = "; ".join(",".join(f"m={m}:{b:.2f}bpp/{p:.1f}dB(naive {q:.1f})" for m, b, p, q in r) for r in rows)
    say(capsys, 8, ok, detail)


def test_criterion_09_position_efficacy(trained, capsys):
    models, _ = trained
    adj = zero = 0.0
    count_ok = True
    for i in range(6):
        c = synth_cloud("line_scan", 7, 9000 + i, 0.75)
        N, m = c.N, c.N - 3
        bs = encode(c, CodecConfig(Mode.LOSSY_SPARSE, N, m), models)
        rec = decode(bs.to_bytes(), models)
        count_ok &= len(rec.points) == len(build_pyramid(c.coordset())[m])
        adj += d1_mse(c, rec)
        zero += d1_mse(c, naive_truncate(c, m))
    ratio = adj / zero
    say(capsys, 9, ratio <= 0.8 and count_ok, f"offset-adjusted MSE / zero-offset MSE = {ratio:.3f} "
                                              f"(need <= 0.8), point counts preserved: {count_ok}")


def test_criterion_10_determinism(trained, heldout, capsys, tmp_path):
    models, _ = trained
    c = heldout[0]
    same_stream = all(
        encode(c, cfg, models).to_bytes() == encode(c, cfg, models).to_bytes()
        for cfg in (CodecConfig(Mode.LOSSLESS, c.N, lossless_arch="slne"),
                    CodecConfig(Mode.LOSSY_DENSE, c.N, c.N - 2),
                    CodecConfig(Mode.LOSSY_SPARSE, c.N, c.N - 2)))
    data = dense_set(4, 0, 5, 0.4, 0.6)
    files = []
    for run in range(2):
        out = {}
        for arch in ("one_stage_sopa", "multistage_sopa_3", "slne", "sopa_position"):
            nets = train(arch, data, Schedule(epochs=2, batch=2, seed=11),
                         config=dict(k=3, C=4, units=1, **({"latent": 2} if arch == "slne" else {})))
            out.update({a: to_bytes(n) for a, n in nets.items()})
        files.append(out)
    same_models = files[0] == files[1]
    say(capsys, 10, same_stream and same_models,
        f"bitstreams identical: {same_stream}; model files identical across training runs: {same_models}")
