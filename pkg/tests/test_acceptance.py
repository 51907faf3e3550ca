"""
Acceptance suite. Each criterion is checked at its stated tolerance and
reports a single PASS/FAIL line (collected in the pytest terminal summary;
``python3 tests/test_acceptance.py`` prints them directly).

Criteria 6 and 7 train networks and are marked ``slow`` (about 2 and 40
minutes on one CPU core).
"""

import math
import os
import statistics
import sys
import tempfile
import time

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from acceptance_log import record  # noqa: E402
from oracles import central_difference, random_onehot_and_probs  # noqa: E402

from effunetpp import cli  # noqa: E402
from effunetpp.analysis import ParetoPoint, decoder_cost, pareto_frontier  # noqa: E402
from effunetpp.architecture import ModelSpec, SegmentationModel, build_decoder_graph, build_model  # noqa: E402
from effunetpp.data import AugmentationPolicy, epoch_items, epoch_stream, generate_phantom, write_dataset  # noqa: E402
from effunetpp.encoders import available_encoders, build_encoder, weight_checksum  # noqa: E402
from effunetpp.losses import LossConfig, combined_loss, focal_loss, gdl, penalize, pgdl  # noqa: E402
from effunetpp.metrics import generalized_dice_score  # noqa: E402
from effunetpp.training import TrainConfig, lr_at, mean_std, run_triplicate, train  # noqa: E402

WIDTH_PRESETS = ("small", "default", "wide")


# --------------------------------------------------------------------------
# 1. loss / metric identities


def check_identities():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        labels, g, p = random_onehot_and_probs(rng, 3, (16, 16))
        g, p = g[None], p[None]
        dsc = 2 * np.sum(g * p) / np.sum(g + p)
        worst = max(worst, abs(float(generalized_dice_score(g, p, [1, 1, 1])) - dsc))
        d = gdl(g, p)
        worst = max(worst, abs(float(pgdl(g, p, k=0.0)) - float(d)))
        q = np.take_along_axis(p[0], labels[None], axis=0)[0]
        ce = float(np.mean(-np.log(q)))
        worst = max(worst, abs(float(focal_loss(g, p, gamma=0.0, alpha=1.0)) - ce))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 10
    return ok, f"max deviation {worst:.2e} (tol 1e-9) over 100 instances in {elapsed:.2f}s (limit 10s)"


def test_criterion_1_identities():
    ok, detail = check_identities()
    record("1 loss/metric identities", ok, detail)
    assert ok, detail


# --------------------------------------------------------------------------
# 2. gradient oracle


def check_gradients():
    # differentiated through the softmax, as in training: finite differences
    # taken directly on probabilities near 0 are dominated by the truncation
    # error of -log q, not by the autodiff result
    rng = np.random.default_rng(2)
    cfg = LossConfig()
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        _, g, p = random_onehot_and_probs(rng, 3, (8, 8))
        g, z = g[None], np.log(p)[None]
        zt = torch.tensor(z, dtype=torch.float64, requires_grad=True)
        combined_loss(g, torch.softmax(zt, 1), cfg).backward()
        auto = zt.grad.numpy()
        fd = central_difference(lambda x: float(combined_loss(g, torch.softmax(torch.from_numpy(x), 1), cfg)), z.copy(), h=1e-5)
        rel = np.abs(auto - fd) / np.maximum(np.maximum(np.abs(auto), np.abs(fd)), 1e-12)
        worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    return ok, f"max relative error {worst:.2e} (tol 1e-4) w.r.t. logits on 20 instances in {elapsed:.1f}s (limit 60s)"


def test_criterion_2_gradient_oracle():
    ok, detail = check_gradients()
    record("2 gradient oracle", ok, detail)
    assert ok, detail


# --------------------------------------------------------------------------
# 3. hand-computed fixtures


def check_fixtures():
    g4 = np.array([[[0, 0, 1, 1], [1, 1, 0, 0]]], dtype=float)
    p4 = np.array([[[0.2, 0.4, 0.8, 0.9], [0.8, 0.6, 0.2, 0.1]]])
    gds = float(generalized_dice_score(g4, p4))
    pg = float(penalize(0.5, 0.75))
    fl = float(focal_loss(np.array([[[1.0], [0.0]]]), np.array([[[0.9], [0.1]]]), 2.0, 0.25))
    errs = [abs(gds - 0.775), abs(pg - 4 / 11), abs(fl - 2.634e-4)]
    ok = max(errs) <= 1e-6
    return ok, f"GDS={gds:.6f}, pGDL(0.5)={pg:.6f}, FL(0.9)={fl:.4e}; max error {max(errs):.1e} (tol 1e-6)"


def test_criterion_3_fixtures():
    ok, detail = check_fixtures()
    record("3 hand-computed fixtures", ok, detail)
    assert ok, detail


# --------------------------------------------------------------------------
# 4. architecture contracts


def _cached_pretrained_ids():
    """EfficientNet ids whose ImageNet weights are already in the local cache."""
    import torchvision.models as tvm

    found = []
    ckpt_dir = os.path.join(torch.hub.get_dir(), "checkpoints")
    for eid in available_encoders():
        if not eid.startswith("efficientnet-"):
            continue
        v = eid.split("-")[1].upper()
        url = getattr(tvm, f"EfficientNet_{v}_Weights").DEFAULT.url
        if os.path.isfile(os.path.join(ckpt_dir, os.path.basename(url))):
            found.append(eid)
    return found


def check_architecture():
    pretrained = _cached_pretrained_ids()
    backbones = [("tiny", False)] + ([(pretrained[0], True)] if pretrained else [("efficientnet-b0", False)])
    problems = []
    for enc_id, use_weights in backbones:
        for family in ("unetpp", "efficient_unetpp"):
            torch.manual_seed(0)
            model = build_model(ModelSpec(encoder_id=enc_id, decoder_family=family, pretrained=use_weights))
            graph = build_decoder_graph(model.spec, model.encoder.out_channels)
            if len(graph.nodes) != 10:
                problems.append(f"{enc_id}/{family}: {len(graph.nodes)} nodes")
            model.eval()
            for hw in (64, 256, 512):
                with torch.no_grad():
                    prob = model.predict_proba(torch.rand(1, 1, hw, hw))
                if prob.shape != (1, 3, hw, hw) or not torch.allclose(prob.sum(1), torch.ones(1, hw, hw), atol=1e-5):
                    problems.append(f"{enc_id}/{family}@{hw}: shape {tuple(prob.shape)}")
            model.train()
            opt = torch.optim.Adam(model.parameters(), lr=1e-3)
            x = torch.rand(2, 1, 64, 64)
            g = torch.nn.functional.one_hot(torch.randint(0, 3, (2, 64, 64)), 3).permute(0, 3, 1, 2).float()
            loss = combined_loss(g, torch.softmax(model(x), 1))
            opt.zero_grad()
            loss.backward()
            dead = [n for n, p in model.decoder.named_parameters() if p.grad is None or not torch.any(p.grad != 0)]
            dead += [f"head.{n}" for n, p in model.head.named_parameters() if p.grad is None or not torch.any(p.grad != 0)]
            opt.step()
            if dead:
                problems.append(f"{enc_id}/{family}: no gradient for {dead[:3]}")
    names = ", ".join(f"{e}{' (ImageNet)' if w else ' (random init; no cached weights)'}" for e, w in backbones)
    ok = not problems
    return ok, f"encoders {names}; both families at 64/256/512; " + ("all contracts hold" if ok else "; ".join(problems))


def test_criterion_4_architecture():
    ok, detail = check_architecture()
    record("4 architecture contracts", ok, detail)
    assert ok, detail


# --------------------------------------------------------------------------
# 5. efficiency claims


def _decoder_costs():
    costs = {}
    for enc_id in available_encoders():
        enc = build_encoder(enc_id)
        for widths in WIDTH_PRESETS:
            for family, att in (("unetpp", "none"), ("efficient_unetpp", "scse"), ("efficient_unetpp", "none")):
                model = SegmentationModel(ModelSpec(encoder_id=enc_id, decoder_family=family, attention=att, decoder_widths=widths), encoder=enc)
                costs[enc_id, widths, family, att] = decoder_cost(model, 512)
    return costs


@pytest.fixture(scope="module")
def decoder_costs():
    return _decoder_costs()


def check_flops(costs):
    worse = []
    ratios = []
    for enc_id in available_encoders():
        for widths in WIDTH_PRESETS:
            eff = costs[enc_id, widths, "efficient_unetpp", "scse"][1]
            ref = costs[enc_id, widths, "unetpp", "none"][1]
            ratios.append(eff / ref)
            if not eff < ref:
                worse.append(f"{enc_id}/{widths}")
    ok = not worse
    detail = f"EfficientUNet++/UNet++ decoder FLOPs ratio {min(ratios):.2f}-{max(ratios):.2f} over {len(ratios)} encoder/width pairs at 512x512"
    return ok, detail + ("" if ok else f"; not cheaper for {worse}")


def check_attention_overhead(costs):
    over = {}
    for enc_id in available_encoders():
        for widths in WIDTH_PRESETS:
            with_att = costs[enc_id, widths, "efficient_unetpp", "scse"][0]
            without = costs[enc_id, widths, "efficient_unetpp", "none"][0]
            over[enc_id, widths] = with_att / without - 1
    worst = max(over, key=over.get)
    ok = all(v < 0.10 for v in over.values())
    return ok, (
        f"scSE decoder parameter overhead {100 * min(over.values()):.0f}%-{100 * over[worst]:.0f}% "
        f"(limit 10%; worst {worst[0]}/{worst[1]}) with squeeze ratio 1 on expanded channels"
    )


def test_criterion_5a_decoder_flops(decoder_costs):
    ok, detail = check_flops(decoder_costs)
    record("5a decoder FLOPs below UNet++", ok, detail)
    assert ok, detail


def test_criterion_5b_attention_overhead(decoder_costs):
    ok, detail = check_attention_overhead(decoder_costs)
    record("5b scSE parameter overhead", ok, detail)
    assert ok, detail


# --------------------------------------------------------------------------
# 6. overfit smoke test through the command line


def check_overfit(workdir):
    import yaml

    data_dir = os.path.join(workdir, "data")
    samples = [generate_phantom(s, 64, 0.4) for s in range(4)]
    for s in samples:
        s.meta["split"] = "train"
    write_dataset(samples, data_dir)
    cfg = {
        "model": {"encoder_id": "tiny", "decoder_family": "efficient_unetpp", "decoder_widths": [64, 32, 16, 16, 8]},
        "train": {"epochs": 200, "batch_size": 2, "lr_drops": [], "val_fraction": 0.0, "seeds": [0]},
        "data": {"dir": data_dir, "split": "train", "test_split": None, "policy": {"copies_per_sample": 0}},
        "output_dir": os.path.join(workdir, "run"),
    }
    cfg_path = os.path.join(workdir, "overfit.yaml")
    with open(cfg_path, "w") as fh:
        yaml.safe_dump(cfg, fh)
    t0 = time.perf_counter()
    code = cli.main(["train", "--config", cfg_path])
    elapsed = time.perf_counter() - t0
    if code != 0:
        return False, f"train exited with {code}"
    code = cli.main(["eval", "--checkpoint", os.path.join(workdir, "run", "best.pt"), "--data", data_dir,
                     "--split", "train", "--out", os.path.join(workdir, "eval")])
    if code != 0:
        return False, f"eval exited with {code}"
    import json

    with open(os.path.join(workdir, "eval", "aggregate.json")) as fh:
        gds = json.load(fh)["gds"]
    ok = gds >= 0.95 and elapsed < 7200
    return ok, f"training-set GDS {gds:.4f} (need >= 0.95) after 200 epochs in {elapsed / 60:.1f} min on CPU (limit 120)"


@pytest.mark.slow
def test_criterion_6_overfit(tmp_path):
    torch.set_num_threads(max(1, torch.get_num_threads()))
    ok, detail = check_overfit(str(tmp_path))
    record("6 overfit smoke test", ok, detail)
    assert ok, detail


# --------------------------------------------------------------------------
# 7. phantom generalization and attention ablation

GEN_TRAIN = dict(epochs=30, batch_size=8, lr_drops=(21,), val_fraction=0.1, seeds=(0, 1, 2))


def check_generalization():
    train_set = [generate_phantom(s, 64, 0.8) for s in range(200)]
    test_set = [generate_phantom(10000 + s, 64, 0.8) for s in range(50)]
    cfg = TrainConfig(**GEN_TRAIN)
    policy = AugmentationPolicy(copies_per_sample=1)
    t0 = time.perf_counter()
    scores = {}
    for att in ("scse", "none"):
        spec = ModelSpec(encoder_id="tiny", decoder_widths=(64, 32, 16, 16, 8), attention=att)
        _, records = run_triplicate(spec, train_set, test_set, cfg, LossConfig(), policy)
        scores[att] = [r.test["gds"] for r in records]
    elapsed = time.perf_counter() - t0
    wins = sum(a > b for a, b in zip(scores["scse"], scores["none"]))
    mean_scse = float(np.mean(scores["scse"]))
    ok = mean_scse >= 0.80 and wins >= 2 and elapsed < 7200
    fmt = lambda v: "/".join(f"{x:.4f}" for x in v)  # noqa: E731
    return ok, (
        f"test GDS scSE {fmt(scores['scse'])} (mean {mean_scse:.4f}, need >= 0.80) vs none {fmt(scores['none'])}; "
        f"scSE wins {wins}/3 (need >= 2); {elapsed / 60:.0f} min"
    )


@pytest.mark.slow
def test_criterion_7_generalization():
    ok, detail = check_generalization()
    record("7 phantom generalization", ok, detail)
    assert ok, detail


# --------------------------------------------------------------------------
# 8. Pareto oracle


def brute_force_frontier(cost, score):
    """O(n^2) dominance test on all pairs."""
    c_i, c_j = cost[:, None], cost[None, :]
    s_i, s_j = score[:, None], score[None, :]
    dominated = ((c_j <= c_i) & (s_j >= s_i) & ((c_j < c_i) | (s_j > s_i))).any(axis=1)
    return set(np.flatnonzero(~dominated).tolist())


def check_pareto():
    rng = np.random.default_rng(8)
    mismatches = 0
    for trial in range(100):
        if trial % 2:
            cost, score = rng.random(1000), rng.random(1000)
        else:  # heavy ties
            cost, score = rng.integers(0, 50, 1000).astype(float), rng.integers(0, 50, 1000) / 50
        pts = [ParetoPoint(str(i), float(s), float(c)) for i, (c, s) in enumerate(zip(cost, score))]
        got = {int(p.label) for p in pareto_frontier(pts)}
        mismatches += got != brute_force_frontier(cost, score)
    return mismatches == 0, f"{100 - mismatches}/100 trials of 1000 points match brute-force dominance exactly"


def test_criterion_8_pareto():
    ok, detail = check_pareto()
    record("8 Pareto oracle", ok, detail)
    assert ok, detail


# --------------------------------------------------------------------------
# 9. protocol reproduction


def check_protocol():
    failures = []
    cfg = TrainConfig()
    for epoch, want in ((1, 1e-3), (49, 1e-3), (50, 1e-4), (99, 1e-4), (100, 1e-5), (150, 1e-5)):
        if not math.isclose(lr_at(epoch, cfg), want, rel_tol=1e-12):
            failures.append(f"lr at epoch {epoch} is {lr_at(epoch, cfg)}")

    policy = AugmentationPolicy()
    if len(epoch_items(237, policy, 1)) != 4 * 237:
        failures.append("epoch size is not 4x")
    small = [generate_phantom(s, 32 * 2, 0.8) for s in range(5)]
    if sum(len(x) for x, _ in epoch_stream(small, policy, 1, batch_size=3)) != 20:
        failures.append("streamed epoch is not 4x")

    phantoms = small[:4]
    quick = TrainConfig(epochs=2, batch_size=2, lr_drops=(), val_fraction=0.0, seeds=(0, 1, 2))
    spec = ModelSpec(encoder_id="tiny", decoder_widths=(16, 8, 8, 8, 8), encoder_widths=(4, 4, 8, 8, 16), freeze_encoder=True)
    torch.manual_seed(0)
    model = build_model(spec)
    before = weight_checksum(model.encoder)
    rec = train(model, phantoms, quick, policy=AugmentationPolicy(copies_per_sample=0), seed=0)
    if not (before == rec.encoder_checksum_after == weight_checksum(model.encoder)):
        failures.append("frozen encoder changed")

    if mean_std([1, 1, 1]) != (1.0, 0.0):
        failures.append("mean_std({1,1,1})")
    m, s = mean_std([0.8, 0.9, 1.0])
    if abs(m - 0.9) > 1e-15 or abs(s - statistics.pstdev([0.8, 0.9, 1.0])) > 1e-15:
        failures.append(f"mean_std(0.8, 0.9, 1.0) = {m}, {s}")
    summary, records = run_triplicate(spec, phantoms, phantoms[:2], TrainConfig(**{**quick.to_dict(), "epochs": 1}),
                                      policy=AugmentationPolicy(copies_per_sample=0))
    per_run = [r.test["gds"] for r in records]
    if summary["gds"] != (float(np.mean(per_run)), float(np.std(per_run))) or len(per_run) != 3:
        failures.append("triplicate aggregation")
    ok = not failures
    return ok, "lr schedule, 4x epoch stream, frozen checksum, triplicate mean/std all exact" if ok else "; ".join(failures)


def test_criterion_9_protocol():
    ok, detail = check_protocol()
    record("9 protocol reproduction", ok, detail)
    assert ok, detail


if __name__ == "__main__":
    checks = [
        ("1 loss/metric identities", check_identities),
        ("2 gradient oracle", check_gradients),
        ("3 hand-computed fixtures", check_fixtures),
        ("4 architecture contracts", check_architecture),
    ]
    for name, fn in checks:
        record(name, *fn())
    costs = _decoder_costs()
    record("5a decoder FLOPs below UNet++", *check_flops(costs))
    record("5b scSE parameter overhead", *check_attention_overhead(costs))
    with tempfile.TemporaryDirectory() as tmp:
        record("6 overfit smoke test", *check_overfit(tmp))
    record("7 phantom generalization", *check_generalization())
    record("8 Pareto oracle", *check_pareto())
    record("9 protocol reproduction", *check_protocol())
