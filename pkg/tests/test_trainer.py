import csv
import hashlib

import numpy as np
import pytest
from scipy.linalg import expm

from hkd import numcore as nc
from hkd.config import RunConfig
from hkd.koopman import LatentPyramid
from hkd.netarch import HKDModel
from hkd.numcore import ShapeError, Tape, Tensor
from hkd.persist import Checkpoint, checkpoint_bytes
from hkd.teacher import Schedule, generate_dataset, make_gmm
from hkd.trainer import (METRIC_COLUMNS, DatasetMismatchError, NonFiniteLossError,
                         PerceptualExtractor, hkd_forward, image_distance, lambda1_schedule,
                         latent_discrepancy, loss_equivalence_probe, one_step_sample,
                         pearson, perceptual_distance, predict, train,
                         trajectory_consistency_loss)

from conftest import fd_grad, rel_err

TINY = """model.image_size=8
model.levels=2
model.latent_channels=4,6
model.hidden_widths=5,7
teacher.components=2
teacher.std=0.4
teacher.n_traj=8
teacher.n_grid=4
teacher.substeps=8
train.batch_size=4
train.epochs=2
train.log_interval=1
"""


def tiny_setup(text=TINY):
    run = RunConfig.parse(text)
    m, t = run.model, run.teacher
    ds = generate_dataset(make_gmm(m, t), Schedule(m.epsilon, m.horizon), t.n_traj, t.n_grid,
                          t.substeps, seed=t.seed)
    return run, ds


def random_model(run, dtype=np.float64, seed=0):
    model = HKDModel(run.model, dtype=dtype)
    rng = np.random.default_rng(seed)
    for v in model.params.values():
        v.data = (v.data + 0.2 * rng.normal(size=v.shape)).astype(dtype)
    for op in model.koopman:
        op.alpha.data = (-0.3 * rng.random(op.alpha.shape)).astype(dtype)
        op.beta.data = rng.normal(size=op.beta.shape).astype(dtype)
    model.run = run
    return model


# --- forward map ---------------------------------------------------------------------------

def test_forward_at_epsilon_ignores_koopman(rng):
    run, _ = tiny_setup()
    model = random_model(run)
    x = rng.normal(size=(2, 1, 8, 8))
    eps = run.model.epsilon
    np.testing.assert_array_equal(hkd_forward(model, x, eps).data,
                                  model.decode(model.encode(x, eps)).data)


def test_forward_with_zero_operator(rng):
    run, _ = tiny_setup()
    model = random_model(run)
    for op in model.koopman:
        op.alpha.data[:] = 0
        op.beta.data[:] = 0
    x = rng.normal(size=(2, 1, 8, 8))
    np.testing.assert_allclose(hkd_forward(model, x, 2.1).data,
                               model.decode(model.encode(x, 2.1)).data, rtol=0, atol=1e-13)


def test_forward_composition_oracle(rng):
    run, _ = tiny_setup()
    model = random_model(run)
    x = rng.normal(size=(1, 1, 8, 8))
    T, eps = run.model.horizon, run.model.epsilon
    pyr = model.encode(x, T)
    levels = []
    for z, op in zip(pyr.levels, model.koopman):
        _, d, h, w = z.shape
        out = np.empty_like(z.data)
        for i in range(h):
            for j in range(w):
                A = np.zeros((d, d))
                for k in range(d // 2):
                    a, b = op.alpha.data[k, i, j], op.beta.data[k, i, j]
                    A[2 * k:2 * k + 2, 2 * k:2 * k + 2] = [[a, b], [-b, a]]
                out[0, :, i, j] = expm(A * (eps - T)) @ z.data[0, :, i, j]
        levels.append(Tensor(out))
    want = model.decode(LatentPyramid(levels)).data
    got = hkd_forward(model, x, T).data
    assert np.max(np.abs(got - want)) < 1e-6


def test_forward_end_to_end_gradient(rng):
    run, _ = tiny_setup()
    model = random_model(run)
    x = rng.normal(size=(1, 1, 8, 8))
    wt = rng.normal(size=(1, 1, 8, 8))
    op = model.koopman[1]

    def f_x(xx):
        return float(np.sum(hkd_forward(model, xx, 1.7).data * wt))

    def f_alpha(a):
        old = op.alpha.data
        op.alpha.data = a
        try:
            return f_x(x)
        finally:
            op.alpha.data = old

    xt = Tensor(x, requires_grad=True, dtype=np.float64)
    for p in model.parameters():
        p.grad = None
    tape = Tape()
    with tape:
        loss = nc.sum_(nc.mul(hkd_forward(model, xt, 1.7), Tensor(wt)))
    nc.backward(loss, tape)
    assert rel_err(xt.grad, fd_grad(f_x, [x.copy()], 0)) < 1e-3
    assert rel_err(op.alpha.grad, fd_grad(f_alpha, [op.alpha.data.copy()], 0)) < 1e-3


# --- perceptual surrogate ------------------------------------------------------------------

def hand_features(ex, x):
    """Loop-based reference evaluation of the extractor for one image."""
    def conv(img, k, b):
        cin, h, w = img.shape
        p = np.pad(img, ((0, 0), (1, 1), (1, 1)))
        out = np.zeros((k.shape[0], h, w))
        for o in range(k.shape[0]):
            for i in range(h):
                for j in range(w):
                    out[o, i, j] = np.sum(p[:, i:i + 3, j:j + 3] * k[o]) + b[o]
        return out

    def pool(img):
        c, h, w = img.shape
        return img.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    h = pool(conv(x, ex.k1.data, ex.b1.data))
    h = h / (1 + np.exp(-h))
    return pool(conv(h, ex.k2.data, ex.b2.data))


def test_perceptual_hand_evaluation(rng):
    ex = PerceptualExtractor(1, features=3, seed=7, dtype=np.float64)
    x = rng.uniform(-1, 1, size=(2, 1, 4, 4))
    y = rng.uniform(-1, 1, size=(2, 1, 4, 4))
    fx = np.stack([hand_features(ex, im) for im in x])
    fy = np.stack([hand_features(ex, im) for im in y])
    np.testing.assert_allclose(ex(Tensor(x)).data, fx, rtol=0, atol=1e-10)
    got = perceptual_distance(ex, x, y).item()
    assert got == pytest.approx(np.mean((fx - fy) ** 2), rel=1e-6)


def test_perceptual_identity_and_symmetry(rng):
    ex = PerceptualExtractor(1)
    x = rng.normal(size=(3, 1, 8, 8)).astype(np.float32)
    y = rng.normal(size=(3, 1, 8, 8)).astype(np.float32)
    assert perceptual_distance(ex, x, x).item() == 0.0
    assert perceptual_distance(ex, x, y).item() == perceptual_distance(ex, y, x).item()
    assert perceptual_distance(ex, x, y).item() > 0
    with pytest.raises(ShapeError):
        perceptual_distance(ex, x, y[:2])


def test_extractor_seeded():
    a, b = PerceptualExtractor(3, seed=5), PerceptualExtractor(3, seed=5)
    assert a.k1.data.tobytes() == b.k1.data.tobytes() and a.b2.data.tobytes() == b.b2.data.tobytes()
    assert PerceptualExtractor(3, seed=6).k1.data.tobytes() != a.k1.data.tobytes()


# --- loss ------------------------------------------------------------------------------

def test_lambda1_schedule():
    assert lambda1_schedule(0, 10) == pytest.approx(0.1, rel=1e-15)
    assert lambda1_schedule(10, 10) == pytest.approx(0.001, rel=1e-15)
    assert lambda1_schedule(5, 10) == pytest.approx(10 ** -np.sqrt(3), rel=1e-15)
    assert lambda1_schedule(5, 10) == pytest.approx(0.0185331, abs=5e-8)
    with pytest.raises(ValueError):
        lambda1_schedule(11, 10)


def test_perfect_stub_gives_zero_loss(rng):
    states = rng.normal(size=(3, 4, 1, 8, 8))
    times = np.array([3.0, 2.0, 1.0, 0.02])
    sampled = [0, 2]

    def stub(x, t):
        return Tensor(np.concatenate([states[:, -1]] * len(sampled)))

    terms = trajectory_consistency_loss(stub, states, times, sampled, 0.1, PerceptualExtractor(1))
    assert terms.total.item() == 0.0


def test_constant_offset_stub(rng):
    states = rng.normal(size=(2, 3, 1, 8, 8))
    c = 0.37

    def stub(x, t):
        return Tensor(states[:, -1] + c)

    terms = trajectory_consistency_loss(stub, states, np.array([3.0, 1.0, 0.02]), [0], 1.0, None, lam2=0)
    assert terms.total.item() == pytest.approx(c * c, rel=1e-12)


def test_empty_sample_set_rejected(rng):
    with pytest.raises(ValueError):
        trajectory_consistency_loss(lambda x, t: x, rng.normal(size=(1, 2, 1, 8, 8)),
                                    np.array([3.0, 0.02]), [], 1.0, None, 0)


def test_term_by_term_oracle(rng):
    run, ds = tiny_setup()
    model = random_model(run)
    ex = PerceptualExtractor(1, dtype=np.float64)
    times = ds.times.astype(np.float64)
    states = ds.states[:3].astype(np.float64)
    sampled, lam1 = [0, 2], 0.05
    fwd = lambda x, t: hkd_forward(model, x, t)  # noqa: E731
    got = trajectory_consistency_loss(fwd, states, times, sampled, lam1, ex).total.item()
    terms = []
    for g in sampled:
        for n in range(3):
            pred = hkd_forward(model, states[n, g][None], times[g])
            terms.append(image_distance(pred, Tensor(states[n, -1][None]), lam1, ex).total.item())
    assert got == pytest.approx(np.mean(terms), rel=1e-6)


def test_loss_non_negative(rng):
    run, ds = tiny_setup()
    model = random_model(run, seed=4)
    ex = PerceptualExtractor(1, dtype=np.float64)
    for k in range(5):
        sampled = [0] + list(rng.integers(1, 4, size=2))
        t = trajectory_consistency_loss(lambda x, tt: hkd_forward(model, x, tt),
                                        ds.states[:2].astype(np.float64), ds.times, sampled, 0.1, ex)
        assert t.total.item() >= 0 and t.mse.item() >= 0 and t.feat.item() >= 0


def test_epsilon_term_independent_of_koopman():
    run, ds = tiny_setup()
    model = random_model(run)
    ex = PerceptualExtractor(1, dtype=np.float64)
    times = ds.times.astype(np.float64)
    times[-1] = run.model.epsilon
    tape = Tape()
    with tape:
        terms = trajectory_consistency_loss(lambda x, t: hkd_forward(model, x, t),
                                            ds.states[:4].astype(np.float64), times,
                                            [ds.n_grid - 1], 0.1, ex)
    nc.backward(terms.total, tape)
    norm = np.sqrt(sum(np.sum(p.grad ** 2) for op in model.koopman for p in (op.alpha, op.beta)))
    assert norm < 1e-8
    assert np.linalg.norm(model.params["decoder.out.weight"].grad) > 0


# --- training --------------------------------------------------------------------------------

def test_zero_epochs_returns_initialization(tmp_path):
    run, ds = tiny_setup(TINY.replace("train.epochs=2", "train.epochs=0"))
    res = train(run, ds, checkpoint_path=tmp_path / "c.ckpt", metrics_path=tmp_path / "m.csv")
    assert res.checkpoint.same_as(Checkpoint.from_model(HKDModel(run.model), run.text))
    assert res.metrics == [] and res.history == []
    assert (tmp_path / "c.ckpt").read_bytes() == checkpoint_bytes(res.checkpoint)
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows == [list(METRIC_COLUMNS)]


def test_training_deterministic(tmp_path):
    run, ds = tiny_setup()
    a = train(run, ds, checkpoint_path=tmp_path / "a.ckpt")
    b = train(run, ds, checkpoint_path=tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert a.history == b.history


def test_endpoint_always_sampled_and_metrics_written(tmp_path):
    run, ds = tiny_setup()
    seen = []
    res = train(run, ds, metrics_path=tmp_path / "m.csv", hook=seen.append)
    assert len(seen) == 2 * (8 // 4)
    for info in seen:
        assert info["sampled_times"][0] == run.model.horizon
        assert len(info["sampled_times"]) == run.train.samples_per_iter
        assert np.all(info["sampled_times"] >= run.model.epsilon)
        assert np.all(info["sampled_times"] <= run.model.horizon)
    with open(tmp_path / "m.csv") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == list(METRIC_COLUMNS)
    assert [int(r["iter"]) for r in rows] == [1, 2, 3, 4]
    assert float(rows[0]["lambda1"]) == pytest.approx(0.1)
    assert float(rows[-1]["loss_total"]) == res.history[-1]


def test_gradient_reaches_every_group():
    run, ds = tiny_setup(TINY.replace("train.epochs=2", "train.epochs=1"))
    model = train(run, ds).model
    ex = PerceptualExtractor(1)
    tape = Tape()
    with tape:
        terms = trajectory_consistency_loss(lambda x, t: hkd_forward(model, x, t), ds.states[:4],
                                            ds.times.astype(np.float64), [0, 1, 2], 0.1, ex)
    nc.backward(terms.total, tape)
    for name, ts in model.groups().items():
        assert sum(float(np.sum(t.grad.astype(np.float64) ** 2)) for t in ts) > 0, name
    for op in model.koopman:
        assert np.any(op.alpha.grad) and np.any(op.beta.grad)


def test_dataset_shape_mismatch():
    run, ds = tiny_setup()
    other = RunConfig.parse(TINY.replace("model.image_size=8", "model.image_size=16"))
    with pytest.raises(DatasetMismatchError, match=r"\(1, 8, 8\).*\(1, 16, 16\)"):
        train(other, ds)


def test_non_finite_loss_reports_iteration():
    run, ds = tiny_setup()
    ds.states[:, 0] = np.inf
    with np.errstate(all="ignore"), pytest.raises(NonFiniteLossError) as e:
        train(run, ds)
    assert e.value.iteration == 1


# --- sampling ------------------------------------------------------------------------------

def test_sampler_deterministic_and_pure():
    run, ds = tiny_setup()
    ck = train(run, ds).checkpoint
    before = hashlib.sha256(checkpoint_bytes(ck)).hexdigest()
    a = one_step_sample(ck, 5, seed=3)
    b = one_step_sample(ck, 5, seed=3)
    assert a.tobytes() == b.tobytes()
    assert hashlib.sha256(checkpoint_bytes(ck)).hexdigest() == before
    assert one_step_sample(ck, 5, seed=4).tobytes() != a.tobytes()


def test_untrained_sampler_output():
    run, _ = tiny_setup()
    model = HKDModel(run.model)
    model.run = run
    out = one_step_sample(model, 4, seed=0)
    assert out.shape == (4, 1, 8, 8) and np.all(np.isfinite(out))
    assert np.ptp(out, axis=0).max() == 0.0


def test_predict_matches_forward_in_chunks(rng):
    run, _ = tiny_setup()
    model = random_model(run)
    x = rng.normal(size=(7, 1, 8, 8))
    t = rng.uniform(0.02, 3.0, size=7)
    np.testing.assert_array_equal(predict(model, x, t, chunk=3), hkd_forward(model, x, t).data)


# --- loss equivalence probe -------------------------------------------------------------------

def test_pearson_identical_vectors():
    v = np.array([0.3, 1.2, 0.1, 5.0])
    r, degenerate = pearson(v, v)
    assert r == pytest.approx(1.0, abs=1e-15) and not degenerate


def test_probe_perfect_stub_is_degenerate():
    run, ds = tiny_setup()
    model = HKDModel(run.model)
    for v in model.params.values():
        v.data[:] = 0
    model.run = run
    lookup = {ds.states[n, g].tobytes(): ds.states[n, -1] for n in range(ds.n_traj) for g in range(ds.n_grid)}

    def perfect(x, t):
        return Tensor(np.stack([lookup[xi.tobytes()] for xi in x]))

    res = loss_equivalence_probe(model, ds, 12, forward=perfect)
    assert res.degenerate and np.isnan(res.correlation)
    assert not np.any(res.image_losses) and not np.any(res.latent_losses)


def test_latent_discrepancy_zero_at_horizon(rng):
    run, _ = tiny_setup()
    model = random_model(run)
    x = rng.normal(size=(2, 1, 8, 8))
    assert np.all(latent_discrepancy(model, x, np.full(2, 3.0), x) == 0)
