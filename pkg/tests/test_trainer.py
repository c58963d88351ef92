import csv
import json
import math
import struct

import numpy as np
import pytest
import torch

import helpers
import oracles
from cellstream import augment, multiview, trainer
from cellstream.augment import ClipSpec, CropSpec
from cellstream.curriculum import CurriculumParams
from cellstream.trainer import Classifier, ImageViewSet, RunMetrics, TrainConfig

FULL = CropSpec((1.0, 1.0), (1.0, 1.0), out_size=16)


def _images(n, seed, side=16):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, (n, 3, side, side), dtype=np.uint8), rng.integers(0, 2, n)


def _toy_sets(n=24, crop=FULL):
    imgs, labels = _images(n, 0)
    vi, vl = _images(8, 1)
    return ImageViewSet(imgs, labels, crop, 2), ImageViewSet(vi, vl, crop, 2)


# -- model ---------------------------------------------------------------------

def test_zero_head_gives_uniform_output():
    model = Classifier().reset_parameters(0)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    out = trainer.forward(model, _images(4, 0)[0])
    assert np.array_equal(out, np.full((4, 2), 0.5))


def test_output_is_normalised():
    model = Classifier(6, 5).reset_parameters(3)
    out = trainer.forward(model, np.random.default_rng(0).integers(0, 256, (7, 6, 20, 20)))
    assert np.all(out > 0) and np.allclose(out.sum(axis=1), 1, atol=1e-6)


def test_forward_matches_straight_line_reference():
    model = Classifier().reset_parameters(11).double()
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (torch.nn.Conv2d, torch.nn.Linear)):
                m.bias.uniform_(-0.1, 0.1)
    x = np.random.default_rng(2).integers(0, 256, (3, 16, 16)) / 255.0
    params = [(m.weight.detach().numpy(), m.bias.detach().numpy())
              for m in model.modules() if isinstance(m, (torch.nn.Conv2d, torch.nn.Linear))]
    want = oracles.cnn_forward(params, x)
    got = model(torch.from_numpy(x)[None]).detach().numpy()[0]
    assert np.allclose(got, want, rtol=0, atol=1e-12)


def test_architecture():
    model = Classifier(27, 2)
    convs = [m for m in model.features if isinstance(m, torch.nn.Conv2d)]
    assert [(c.in_channels, c.out_channels, c.kernel_size, c.padding) for c in convs] == [
        (27, 32, (3, 3), (1, 1)), (32, 64, (3, 3), (1, 1)), (64, 128, (3, 3), (1, 1))]
    acts = [m for m in model.features if isinstance(m, torch.nn.LeakyReLU)]
    assert len(acts) == 3 and all(a.negative_slope == 0.01 for a in acts)
    assert sum(isinstance(m, torch.nn.MaxPool2d) for m in model.features) == 3
    assert model.head.in_features == 128


@pytest.mark.parametrize("shape,msg", [((2, 4, 16, 16), r"\[N, 3, H, W\].*\[2, 4, 16, 16\]"),
                                       ((3, 16, 16), r"\[3, 16, 16\]"), ((1, 3, 4, 4), "minimum")])
def test_shape_mismatch(shape, msg):
    with pytest.raises(ValueError, match=msg):
        trainer.forward(Classifier(), np.zeros(shape))


def test_seeded_init_reproducible():
    a = Classifier().reset_parameters(5).state_dict()
    b = Classifier().reset_parameters(5).state_dict()
    c = Classifier().reset_parameters(6).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not torch.equal(a["head.weight"], c["head.weight"])


# -- loss and schedule ---------------------------------------------------------

def test_cross_entropy_examples():
    assert trainer.cross_entropy_ls([0.99, 0.01], 0, 0) == pytest.approx(-math.log(0.99), abs=1e-15)
    assert trainer.cross_entropy_ls([0.5, 0.5], 1, 0.4) == pytest.approx(math.log(2), abs=1e-15)
    assert np.allclose(trainer.smoothed_targets(1, 2, 0.4), [0.2, 0.8])
    for k in (2, 5, 10):
        for r in (0, 0.3, 0.9):
            assert trainer.cross_entropy_ls(np.full(k, 1 / k), 0, r) == pytest.approx(math.log(k), abs=1e-12)


def test_cross_entropy_rejects_ratio():
    with pytest.raises(ValueError):
        trainer.cross_entropy_ls([0.5, 0.5], 0, 1.0)


def test_zero_smoothing_is_plain_cross_entropy():
    rng = np.random.default_rng(0)
    for _ in range(200):
        h = rng.dirichlet(np.ones(4))
        t = int(rng.integers(4))
        assert abs(trainer.cross_entropy_ls(h, t, 0) + math.log(h[t])) <= 1e-12


def test_batch_loss_agrees_with_per_sample_formula():
    rng = np.random.default_rng(1)
    logits = torch.from_numpy(rng.normal(size=(6, 3)))
    y = torch.from_numpy(rng.integers(0, 3, 6))
    h = torch.softmax(logits, 1).numpy()
    for r in (0.0, 0.4):
        want = np.mean([trainer.cross_entropy_ls(h[i], int(y[i]), r) for i in range(6)])
        assert float(trainer.smoothed_nll(logits, y, r)) == pytest.approx(want, abs=1e-12)


def test_cosine_lr():
    assert trainer.cosine_lr(0, 60, 1e-3) == 1e-3
    assert trainer.cosine_lr(60, 60, 1e-3) == pytest.approx(0, abs=1e-20)
    assert trainer.cosine_lr(30, 60, 1e-3) == pytest.approx(5e-4, abs=1e-18)
    with pytest.raises(ValueError):
        trainer.cosine_lr(61, 60, 1e-3)


# -- config and metrics ----------------------------------------------------------

def test_train_config_defaults():
    c = TrainConfig()
    assert (c.lr0, c.beta1, c.beta2, c.eps, c.seeds) == (1e-3, 0.9, 0.999, 1e-8, (42, 0, 17, 9, 3))


@pytest.mark.parametrize("kw", [dict(lr0=-1), dict(epochs=0), dict(batch_size=0), dict(lr_schedule="step"),
                                dict(label_smoothing=1.0), dict(task="PLT"), dict(seeds=())])
def test_train_config_invariants(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw).validate()


def test_train_config_roundtrip():
    c = TrainConfig(curriculum=CurriculumParams(T=7), crop=CropSpec(out_size=24), seeds=(1, 2))
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


def test_summarize_std_over_seeds():
    runs = [RunMetrics(seed=s, test_acc={"baseline": v}) for s, v in zip((42, 0, 17, 9, 3), (80, 82, 84, 86, 88))]
    s = trainer.summarize(runs)["baseline"]
    assert s["n"] == 5 and s["mean"] == 84 and s["std"] == pytest.approx(np.std([80, 82, 84, 86, 88], ddof=1))
    assert math.isnan(trainer.summarize(runs[:1])["baseline"]["std"])


# -- training ------------------------------------------------------------------------

def test_zero_learning_rate_keeps_parameters():
    tr, va = _toy_sets()
    model, _ = trainer.train_views(TrainConfig(lr0=0.0, epochs=3, batch_size=8), tr, va, seed=4)
    fresh = Classifier(3, 2).reset_parameters(4).state_dict()
    assert all(torch.equal(model.state_dict()[k], fresh[k]) for k in fresh)


def test_overfits_eight_samples():
    imgs, labels = _images(8, 2)
    labels = np.array([0, 1] * 4)
    tr = ImageViewSet(imgs, labels, FULL, 2)
    cfg = TrainConfig(epochs=200, batch_size=8, lr_schedule="constant")
    model, metrics = trainer.train_views(cfg, tr, tr, seed=0)
    assert np.array_equal(trainer.forward(model, imgs).argmax(1), labels)
    assert metrics.val_acc[metrics.best_epoch] == 100.0


def test_training_is_reproducible_and_finite():
    tr, va = _toy_sets(crop=CropSpec(out_size=8))
    cfg = TrainConfig(epochs=3, batch_size=5)
    m1, r1 = trainer.train_views(cfg, tr, va, seed=9)
    m2, r2 = trainer.train_views(cfg, tr, va, seed=9)
    assert r1.train_loss == r2.train_loss and r1.val_loss == r2.val_loss
    assert all(torch.equal(m1.state_dict()[k], m2.state_dict()[k]) for k in m1.state_dict())
    assert all(math.isfinite(v) for v in r1.train_loss + r1.val_loss)


def test_best_validation_checkpoint_returned():
    tr, va = _toy_sets(crop=CropSpec(out_size=8))
    cfg = TrainConfig(epochs=6, batch_size=6, lr0=5e-3)
    model, metrics = trainer.train_views(cfg, tr, va, seed=1)
    assert metrics.best_val_loss == min(metrics.val_loss)
    assert metrics.val_loss[metrics.best_epoch] == metrics.best_val_loss
    # recompute on the same fixed validation views
    x = trainer.to_input(va.views(range(len(va)), np.random.default_rng([1, 7919])))
    loss, _ = trainer._eval_loss_acc(model, x, torch.from_numpy(va.labels), 0.0)
    assert loss == pytest.approx(metrics.best_val_loss, abs=1e-6)


def test_learning_rate_follows_cosine():
    tr, va = _toy_sets(n=6, crop=CropSpec(out_size=8))
    _, metrics = trainer.train_views(TrainConfig(epochs=4, batch_size=6), tr, va, seed=0)
    assert metrics.lr == [trainer.cosine_lr(t, 4, 1e-3) for t in range(4)]


def test_empty_eligible_set_falls_back(caplog):
    tr, va = _toy_sets(n=30, crop=CropSpec(out_size=8))
    tr.entries = [{"b": 10, "l_wbc": 1000.0, "l_rbc": 1000.0}] * 29 + [{"b": 9, "l_wbc": 1000.0, "l_rbc": 0.0}]
    cfg = TrainConfig(epochs=2, batch_size=4, curriculum=CurriculumParams(T=5))
    with caplog.at_level("WARNING"):
        _, metrics = trainer.train_views(cfg, tr, va, seed=0)
    assert metrics.n_eligible == [1, 1]
    assert "easiest" in caplog.text


def test_curriculum_on_video_dataset(tiny_dataset):
    from cellstream import curriculum

    _, manifest = tiny_dataset
    cur = CurriculumParams.for_task("WBC", None, T=4, c0=0.3, l_norm_scale=15)
    cfg = TrainConfig(epochs=4, batch_size=4, curriculum=cur, crop=CropSpec(out_size=8), seeds=(3,))
    sets = trainer.view_sets(cfg, manifest)
    _, metrics = trainer.train_views(cfg, sets["train"], sets["val"], seed=3)
    assert metrics.n_eligible == sorted(metrics.n_eligible)
    first = curriculum.eligible_set(sets["train"].entries, 0, cur, "WBC")
    last = curriculum.eligible_set(sets["train"].entries, cur.T, cur, "WBC")
    assert set(map(id, first)) <= set(map(id, last)) and len(last) == len(sets["train"])


class _NanViews(ImageViewSet):
    def view(self, i, rng):
        return np.full((3, 16, 16), np.nan, dtype=np.float32)


def test_non_finite_loss_raises():
    imgs, labels = _images(4, 0)
    with pytest.raises(FloatingPointError, match="epoch 0"):
        trainer.train_views(TrainConfig(epochs=1, batch_size=4), _NanViews(imgs, labels, FULL, 2),
                            ImageViewSet(imgs, labels, FULL, 2), seed=0)


# -- evaluation ------------------------------------------------------------------------

def test_perfect_predictor_scores_100():
    imgs = np.stack([np.full((3, 32, 32), 255 * (i % 2), np.uint8) for i in range(10)])
    vs = ImageViewSet(imgs, np.arange(10) % 2, CropSpec(), 2)
    acc = trainer.evaluate(helpers.perfect_classifier(), vs, m=5)
    assert acc == {"baseline": 100.0, "mvm": 100.0, "mvwcos": 100.0}


def test_single_view_methods_equal():
    tr, va = _toy_sets(crop=CropSpec(out_size=8))
    model = Classifier(3, 2).reset_parameters(2)
    acc = trainer.evaluate(model, va, m=1)
    assert acc["baseline"] == acc["mvm"] == acc["mvwcos"]


def test_unknown_method_rejected():
    _, va = _toy_sets(crop=CropSpec(out_size=8))
    with pytest.raises(ValueError):
        trainer.evaluate(Classifier(), va, methods=("vote",), m=2)


def test_majority_vote_amplification():
    # each view is right with probability 0.7, independently
    rng = np.random.default_rng(0)
    n, m = 4000, 11
    correct_single = correct_mv = 0
    for _ in range(n):
        def aug(sample, r):
            return r.random() < 0.7

        def predictor(ok):
            return [0.2, 0.8] if ok else [0.8, 0.2]

        res = multiview.multiview_predict(predictor, None, m, aug, "mvm", rng)
        correct_mv += res.final_class == 1
        correct_single += predictor(rng.random() < 0.7)[1] > 0.5
    analytic = sum(math.comb(m, k) * 0.7 ** k * 0.3 ** (m - k) for k in range(6, m + 1))
    assert correct_mv / n > correct_single / n
    assert abs(correct_mv / n - analytic) < 4 * math.sqrt(analytic * (1 - analytic) / n)


def test_view_probabilities_batch_independent():
    _, va = _toy_sets(crop=CropSpec(out_size=8))
    model = Classifier().reset_parameters(0)
    a = trainer.view_probabilities(model, va, 3, seed=5, batch=256)
    b = trainer.view_probabilities(model, va, 3, seed=5, batch=4)
    assert np.allclose(a, b, atol=1e-6)


def test_trace_lines(tmp_path):
    _, va = _toy_sets(crop=CropSpec(out_size=8))
    trainer.evaluate(Classifier().reset_parameters(0), va, m=4, trace=tmp_path / "t.jsonl")
    lines = [json.loads(x) for x in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert len(lines) == 3 * len(va)
    assert {x["method"] for x in lines} == {"baseline", "mvm", "mvwcos"}
    assert all(x["views_used"] == (1 if x["method"] == "baseline" else 4) for x in lines)


def test_video_view_matches_make_view(tiny_dataset):
    from cellstream import synthcells as sc

    _, manifest = tiny_dataset
    vs = trainer.VideoViewSet(manifest, "train", "RBC", ClipSpec(3), CropSpec(out_size=8))
    video = sc.read_sample(manifest.sample_path(vs.entries[2]))
    a = vs.view(2, np.random.default_rng(4))
    b = augment.make_view(video, ClipSpec(3), CropSpec(out_size=8), np.random.default_rng(4))
    assert a.shape == (9, 8, 8) and np.array_equal(a, b)
    assert vs.labels.tolist() == [e.rbc_high for e in vs.entries]


# -- gradient check ------------------------------------------------------------------

def test_gradient_check_head_only():
    model = Classifier(3, 3, channels=()).reset_parameters(0)
    x = np.random.default_rng(0).random((3, 8, 8))
    assert trainer.gradient_check(model, x, target=2, eps=1e-4, n_params=100) <= 1e-6


def test_gradient_check_full_cnn():
    model = Classifier().reset_parameters(1)
    x = np.random.default_rng(1).random((3, 16, 16))
    assert trainer.gradient_check(model, x, target=1, eps=1e-4, n_params=120, ratio=0.4) <= 1e-3


def test_gradient_check_zero_input_biases():
    model = Classifier().reset_parameters(2)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, torch.nn.Conv2d):
                m.bias.uniform_(0.05, 0.2)
    err = trainer.gradient_check(model, np.zeros((3, 16, 16)), target=0, eps=1e-4, n_params=200)
    assert err <= 1e-3
    x = torch.zeros((1, 3, 16, 16), dtype=torch.float64)
    dbl = model.double()
    dbl.zero_grad()
    trainer.smoothed_nll(dbl.logits(x), torch.tensor([0])).backward()
    assert any(float(m.bias.grad.abs().sum()) > 0 for m in dbl.modules() if isinstance(m, torch.nn.Conv2d))


def test_gradient_check_rejects_eps():
    with pytest.raises(ValueError):
        trainer.gradient_check(Classifier(), np.zeros((3, 8, 8)), eps=0.1)


# -- checkpoints ----------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    model = Classifier(9, 3, (8, 16)).reset_parameters(7)
    trainer.save_checkpoint(tmp_path / "m.ckpt", model, {"config": {"x": 1}})
    back, side = trainer.load_checkpoint(tmp_path / "m.ckpt")
    assert side["arch"] == {"in_channels": 9, "num_classes": 3, "channels": [8, 16]} and side["config"] == {"x": 1}
    assert all(torch.equal(back.state_dict()[k], model.state_dict()[k]) for k in model.state_dict())
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:12] == b"CSCK" + struct.pack("<II", 1, len(model.state_dict()))


def test_checkpoint_corruption(tmp_path):
    model = Classifier(3, 2, (4,)).reset_parameters(0)
    trainer.save_checkpoint(tmp_path / "m.ckpt", model, {})
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "m.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        trainer.load_checkpoint(tmp_path / "m.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError):
        trainer.load_checkpoint(tmp_path / "m.ckpt")
    with pytest.raises(FileNotFoundError):
        trainer.load_checkpoint(tmp_path / "other.ckpt")


def test_metrics_csv(tmp_path):
    r = RunMetrics(seed=1, epochs=[0, 1], train_loss=[0.7, 0.6], val_loss=[0.69, 0.65], val_acc=[50.0, 60.0],
                   lr=[1e-3, 5e-4], n_eligible=[10, 12])
    r.write_csv(tmp_path / "m.csv")
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert list(rows[0]) == ["epoch", "train_loss", "val_loss", "val_acc", "lr", "n_eligible"]
    assert float(rows[1]["val_loss"]) == 0.65 and int(rows[1]["n_eligible"]) == 12
