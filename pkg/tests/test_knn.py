import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import tiny_arch
from oracles import accuracy_brute_force, forgetting_brute_force, knn_brute_force, random_lower_triangular
from ucl.augment import AugConfig
from ucl.data import EvalSet
from ucl.knn import (
    AccuracyMatrix,
    KnnConfig,
    average_accuracy,
    average_forgetting,
    evaluate_task,
    extract_features,
    fit_knn_bank,
    knn_predict,
)
from ucl.models import build_encoder_bundle

NORM = (AugConfig().mean, AugConfig().std)

# 1-indexed a11=0.8, a21=0.7, a22=0.9, a31=0.6, a32=0.85, a33=0.95
HAND = [[0.8, None, None], [0.7, 0.9, None], [0.6, 0.85, 0.95]]


# -- bank and prediction -------------------------------------------------------------


def test_bank_rows_unit_norm_and_duplicates():
    feats = torch.tensor([[3.0, 4.0], [3.0, 4.0], [0.0, -2.0]])
    bank = fit_knn_bank(feats, [0, 0, 1])
    assert torch.allclose(bank.features.norm(dim=1), torch.ones(3, dtype=torch.float64), atol=1e-6)
    assert len(bank) == 3


def test_single_point_bank():
    bank = fit_knn_bank(torch.tensor([[1.0, 2.0]]), [7], k=200)
    assert len(bank) == 1
    q = torch.randn(10, 2)
    assert knn_predict(bank, q).tolist() == [7] * 10


def test_self_retrieval_k1():
    g = torch.Generator().manual_seed(0)
    feats = torch.randn(30, 8, generator=g)
    labels = np.arange(30) % 5
    bank = fit_knn_bank(feats, labels, k=1)
    assert knn_predict(bank, feats).tolist() == labels.tolist()


def test_hand_fixture_2d():
    # 2D points, k=3, T=0.1; the brute-force oracle scores every class exhaustively
    bank_x = np.array([[1.0, 0.0], [0.8, 0.6], [0.0, 1.0], [-1.0, 0.0]])
    bank_y = np.array([0, 1, 1, 0])
    queries = np.array([[1.0, 0.1], [0.3, 1.0], [-1.0, -0.2], [0.7, 0.7]])
    expected = knn_brute_force(bank_x, bank_y, queries, 3, 0.1)
    got = knn_predict(fit_knn_bank(torch.from_numpy(bank_x), bank_y, k=3, temperature=0.1), torch.from_numpy(queries))
    assert got.tolist() == expected.tolist()
    # query (1, 0.1): neighbours 0 (cos .995), 1 (cos .856), 2 (cos .0995)
    # class 0 -> e^9.95, class 1 -> e^8.56 + e^0.995; class 0 wins
    assert got[0] == 0


def test_class_score_tie_goes_to_lower_id():
    bank = fit_knn_bank(torch.tensor([[1.0, 1.0], [1.0, -1.0]]), [3, 1], k=2)
    assert knn_predict(bank, torch.tensor([[1.0, 0.0]])).tolist() == [1]


@pytest.mark.parametrize("trial", range(200))
def test_matches_brute_force(trial):
    rng = np.random.default_rng(trial)
    n, d = int(rng.integers(1, 40)), int(rng.integers(1, 6))
    k = int(rng.integers(1, 60))
    temp = float(rng.uniform(0.05, 1.0))
    bank_x = rng.normal(size=(n, d))
    bank_y = rng.integers(0, 4, n)
    queries = rng.normal(size=(10, d))
    got = knn_predict(fit_knn_bank(torch.from_numpy(bank_x), bank_y, k, temp), torch.from_numpy(queries))
    assert got.tolist() == knn_brute_force(bank_x, bank_y, queries, k, temp).tolist()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (12, 3), elements=st.floats(-10, 10)), st.floats(1e-3, 1e3))
def test_scale_invariance(feats, c):
    feats = feats + np.array([0.5, 0.0, 0.0])  # keep rows away from zero
    labels = np.arange(12) % 3
    queries = feats[:5] + 0.1
    a = knn_predict(fit_knn_bank(torch.from_numpy(feats), labels, k=4), torch.from_numpy(queries))
    b = knn_predict(fit_knn_bank(torch.from_numpy(c * feats), labels, k=4), torch.from_numpy(c * queries))
    assert a.tolist() == b.tolist()


def test_chunking_does_not_change_predictions():
    g = torch.Generator().manual_seed(1)
    bank = fit_knn_bank(torch.randn(50, 4, generator=g), np.arange(50) % 3, k=7)
    q = torch.randn(33, 4, generator=g)
    assert torch.equal(knn_predict(bank, q, chunk=5), knn_predict(bank, q))


def test_bank_and_query_errors():
    with pytest.raises(ValueError):
        fit_knn_bank(torch.zeros(0, 3), [])
    with pytest.raises(ValueError):
        fit_knn_bank(torch.ones(2, 3), [0])
    with pytest.raises(ValueError):
        fit_knn_bank(torch.tensor([[float("nan"), 1.0]]), [0])
    with pytest.raises(ValueError):
        fit_knn_bank(torch.ones(2, 3), [0, 1], temperature=0.0)
    with pytest.raises(ValueError):
        knn_predict(fit_knn_bank(torch.ones(2, 3), [0, 1]), torch.ones(1, 4))


# -- evaluate_task ------------------------------------------------------------------


def random_set(seed, n, role, num_classes=2, size=8):
    rng = np.random.default_rng(seed)
    images = torch.from_numpy(rng.integers(0, 256, (n, 3, size, size), dtype=np.uint8))
    labels = rng.permutation(np.arange(n) % num_classes)
    return EvalSet(role, images, labels)


def test_self_evaluation_is_perfect(tiny_bundle):
    s = random_set(0, 40, "in_stream_train", num_classes=4)
    acc = evaluate_task(tiny_bundle, s, s, KnnConfig(k=1), NORM)
    assert acc == 1.0


def test_random_features_chance_level():
    accs = []
    for seed in range(5):
        b = build_encoder_bundle(tiny_arch(), seed=seed)
        accs.append(evaluate_task(b, random_set(10 + seed, 100, "in_stream_train"),
                                  random_set(20 + seed, 100, "in_stream_test"), KnnConfig(), NORM))
    assert abs(float(np.mean(accs)) - 0.5) <= 0.1


def test_evaluate_matches_brute_force(tiny_bundle):
    train, test = random_set(1, 30, "in_stream_train", 3), random_set(2, 20, "in_stream_test", 3)
    cfg = KnnConfig(k=5, temperature=0.1)
    acc = evaluate_task(tiny_bundle, train, test, cfg, NORM)
    ftr = extract_features(tiny_bundle, train.images, NORM).double().numpy()
    fte = extract_features(tiny_bundle, test.images, NORM).double().numpy()
    expected = np.mean(knn_brute_force(ftr, train.labels, fte, 5, 0.1) == test.labels)
    assert acc == pytest.approx(float(expected), abs=1e-12)


def test_evaluate_deterministic_and_keeps_mode(tiny_bundle):
    tiny_bundle.train()
    train, test = random_set(3, 20, "in_stream_train"), random_set(4, 20, "in_stream_test")
    before = {k: v.clone() for k, v in tiny_bundle.state_dict().items()}
    a = evaluate_task(tiny_bundle, train, test, KnnConfig(k=5), NORM)
    b = evaluate_task(tiny_bundle, train, test, KnnConfig(k=5), NORM)
    assert a == b and 0.0 <= a <= 1.0
    assert tiny_bundle.training
    assert all(torch.equal(v, before[k]) for k, v in tiny_bundle.state_dict().items())


def test_projector_features(tiny_bundle):
    s = random_set(0, 20, "in_stream_train")
    assert evaluate_task(tiny_bundle, s, s, KnnConfig(k=1, feature_source="projector"), NORM) == 1.0
    with pytest.raises(ValueError):
        evaluate_task(tiny_bundle, s, s, KnnConfig(feature_source="logits"), NORM)


def test_empty_sets(tiny_bundle):
    s = random_set(0, 4, "in_stream_train")
    empty = EvalSet("in_stream_test", s.images[:0], s.labels[:0])
    with pytest.raises(ValueError):
        evaluate_task(tiny_bundle, s, empty)


# -- metrics ------------------------------------------------------------------------


def test_average_accuracy_hand():
    assert average_accuracy(HAND, 2) == pytest.approx(0.8)
    assert average_accuracy(HAND, 0) == 0.8
    assert average_accuracy([[0.3, None], [0.3, 0.3]], 1) == pytest.approx(0.3)


def test_average_forgetting_hand():
    assert average_forgetting(HAND) == pytest.approx(0.125)


def test_monotone_matrix_has_zero_forgetting():
    assert average_forgetting([[0.5, None, None], [0.6, 0.7, None], [0.6, 0.8, 0.9]]) == 0.0


@pytest.mark.parametrize("trial", range(100))
def test_metrics_match_brute_force(trial):
    rng = np.random.default_rng(trial)
    T = int(rng.integers(2, 9))
    m = random_lower_triangular(rng, T)
    assert abs(average_forgetting(m) - forgetting_brute_force(m)) <= 1e-12
    assert average_forgetting(m) >= 0
    tau = int(rng.integers(0, T))
    assert abs(average_accuracy(m, tau) - accuracy_brute_force(m, tau)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_accuracy_invariant_to_row_reordering(T, seed):
    rng = np.random.default_rng(seed)
    m = np.array([[np.nan if v is None else v for v in row] for row in random_lower_triangular(rng, T)])
    tau = T - 1
    shuffled = m.copy()
    shuffled[tau, :T] = rng.permutation(m[tau, :T])
    assert average_accuracy(shuffled, tau) == pytest.approx(average_accuracy(m, tau), abs=1e-12)


def test_forgetting_zero_iff_final_is_max():
    m = [[0.5, None], [0.5, 0.9]]
    assert average_forgetting(m) == 0.0
    m[1][0] = 0.4
    assert average_forgetting(m) > 0


def test_metric_errors():
    with pytest.raises(ValueError):
        average_forgetting([[0.5]])
    with pytest.raises(ValueError):
        average_accuracy([[0.5, None], [0.5, None]], 1)
    with pytest.raises(ValueError):
        average_forgetting([[None, None], [0.5, 0.5]])


def test_accuracy_matrix_container():
    m = AccuracyMatrix(3)
    m.set(0, 0, 0.8)
    assert m.row_complete(0) and not m.row_complete(1)
    with pytest.raises(IndexError):
        m.set(0, 1, 0.5)
    with pytest.raises(ValueError):
        m.set(1, 0, 1.5)
    with pytest.raises(ValueError):
        AccuracyMatrix(0)


def test_csv_round_trip_blank_upper_triangle():
    m = AccuracyMatrix.from_list(HAND)
    text = m.to_csv()
    assert text.splitlines()[0] == "tau,task_0,task_1,task_2"
    assert text.splitlines()[1] == "0,0.8,,"
    assert AccuracyMatrix.from_csv(text).to_list() == HAND
    assert average_forgetting(AccuracyMatrix.from_csv(text)) == pytest.approx(0.125)
