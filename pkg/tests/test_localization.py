import numpy as np
import pytest

from semoran.codec import IdentityCodec
from semoran.csi import N_FEATURES, Dataset, Scene, generate_dataset
from semoran.localization import (
    ErrorReport,
    KnnOracle,
    LocalizerConfig,
    evaluate,
    knn_localize,
    load_localizer,
    report_from_errors,
    save_localizer,
    train_localizer,
)
from semoran.nn import ShapeError

SMALL = LocalizerConfig(hidden_widths=(16,), epochs=3, alpha=0.0005)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(Scene(), 40, seed=11)


def _repeated(ds, n=20):
    idx = np.zeros(n, dtype=np.int64)
    return Dataset(ds.scene, ds.features[idx], ds.labels[idx], ds.seed, np.arange(n))


def test_degenerate_fit_recovers_label(data):
    rep = _repeated(data)
    model = train_localizer(rep, LocalizerConfig())
    x, y = model.predict(rep.features[0].reshape(-1))
    assert np.hypot(x - rep.labels[0, 0], y - rep.labels[0, 1]) < 0.1


def test_zero_epochs_and_determinism(data):
    a = train_localizer(data, LocalizerConfig(hidden_widths=(8,), epochs=0))
    b = train_localizer(data, LocalizerConfig(hidden_widths=(8,), epochs=0))
    for p, q in zip(a.stack.parameters(), b.stack.parameters()):
        assert np.array_equal(p, q)
    m1, m2 = train_localizer(data, SMALL), train_localizer(data, SMALL)
    assert all(np.array_equal(p, q) for p, q in zip(m1.stack.parameters(), m2.stack.parameters()))


def test_predict_is_pure_clamped_and_checks_width(data):
    model = train_localizer(data, SMALL)
    f = data.flat()[3]
    assert model.predict(f) == model.predict(f)
    wild = np.full(N_FEATURES, 1e4, dtype=np.float32)
    x, y = model.predict(wild)
    assert 0 <= x <= data.scene.width and 0 <= y <= data.scene.length
    with pytest.raises(ShapeError):
        model.predict(f[:-1])


def test_checkpoint_roundtrip(data, tmp_path):
    model = train_localizer(data, SMALL)
    save_localizer(model, tmp_path / "l.sem")
    back = load_localizer(tmp_path / "l.sem")
    assert np.array_equal(back.predict_batch(data.flat()[:5]), model.predict_batch(data.flat()[:5]))


def test_knn_rules(data):
    f = data.flat()
    assert knn_localize(data, f[7], k=1) == tuple(float(v) for v in data.labels[7])
    centroid = data.labels.astype(np.float64).mean(axis=0)
    np.testing.assert_allclose(knn_localize(data, f[0], k=len(data)), centroid, rtol=1e-12)
    with pytest.raises(ValueError):
        knn_localize(data, f[0], k=0)


def test_knn_tie_goes_to_lower_index(data):
    idx = np.array([0, 1, 0])
    tied = Dataset(data.scene, data.features[idx], data.labels[idx], 0, np.arange(3))
    # samples 0 and 2 are identical and equally close; sample 0 wins the single slot after the query itself
    got = knn_localize(tied, tied.flat()[0], k=2)
    np.testing.assert_allclose(got, data.labels[0].astype(np.float64))


def test_knn_batch_matches_exact(data):
    oracle = KnnOracle(data, k=3)
    q = data.flat()[:6] + 0.01
    exact = np.array([knn_localize(data, row, 3) for row in q])
    np.testing.assert_allclose(oracle.predict_batch(q), exact, atol=1e-6)


def test_error_report_arithmetic():
    rep = report_from_errors([1.0, 2.0, 3.0])
    assert rep.mean == 2.0
    assert rep.cdf_at(2.0) == 2 / 3
    assert rep.cdf[-1][1] == 1.0
    with pytest.raises(ValueError):
        ErrorReport(np.array([]))


def test_per_sample_csv_roundtrip(data):
    rep = evaluate(train_localizer(data, SMALL), data, name="x")
    back = ErrorReport.from_per_sample_csv(rep.per_sample_csv())
    assert np.array_equal(back.errors, rep.errors)


def test_identity_codec_matches_raw(data):
    model = train_localizer(data, SMALL)
    raw = evaluate(model, data)
    ident = evaluate(model, data, IdentityCodec())
    assert raw.errors.tobytes() == ident.errors.tobytes()
