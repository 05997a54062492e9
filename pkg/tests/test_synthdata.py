import math

import numpy as np
import pytest

from obclip.synthdata import (
    GeneratorConfig,
    distance_histograms,
    dump,
    expected_false_negative_rate,
    false_negative_rate,
    generate,
    load,
    recall_at_k,
    token_subset_eval,
    uniformity,
    uniformity_alignment,
)

# log E exp(-2|x-y|^2) for independent uniform points on S^3, by quadrature of
# the inner-product density (1 - t^2)^(1/2) on [-1, 1]
S3_UNIFORMITY_QUADRATURE = -2.414909581461874
# the same quantity estimated from 10^4 points drawn with default_rng(2024)
S3_UNIFORMITY_MC_SEED2024 = -2.4148837829529577


def test_noiseless_same_class_images_coincide():
    batch = generate(GeneratorConfig(num_classes=2, noise_std=0.0), 50)
    a, b = np.flatnonzero(batch.labels == 0)[:2]
    assert np.array_equal(batch.image[a], batch.image[b])


def test_corruption_rates():
    assert not generate(GeneratorConfig(false_positive_rate=0.0), 1000).corrupted.any()
    batch = generate(GeneratorConfig(false_positive_rate=0.5, seed=3), 10_000)
    assert abs(batch.corrupted.mean() - 0.5) < 0.02
    assert np.all((batch.text_labels != batch.labels) == batch.corrupted)


def test_generation_is_pure():
    cfg = GeneratorConfig(seed=11, false_positive_rate=0.3)
    a, b = generate(cfg, 100), generate(cfg, 100)
    for f in ("image", "text", "labels", "text_labels", "corrupted"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    c = generate(cfg, 100, split="eval")
    assert not np.array_equal(a.image, c.image)


def test_out_of_domain_redraws_readouts():
    a = generate(GeneratorConfig(noise_std=0.0), 20)
    b = generate(GeneratorConfig(noise_std=0.0, out_of_domain=True), 20)
    assert np.array_equal(a.labels, b.labels)
    assert not np.allclose(a.image, b.image)


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(num_classes=1)
    with pytest.raises(ValueError):
        GeneratorConfig(false_positive_rate=1.0)
    with pytest.raises(ValueError):
        GeneratorConfig.from_dict({"num_classes": 4, "colour": 1})
    with pytest.raises(ValueError):
        generate(GeneratorConfig(), 0)


def test_dump_load_round_trip(tmp_path):
    cfg = GeneratorConfig(num_classes=5, image_dim=6, text_dim=4, false_positive_rate=0.4, seed=9)
    batch = generate(cfg, 40)
    csv_path, side = dump(batch, cfg, tmp_path / "data.csv")
    loaded, cfg2 = load(csv_path)
    assert cfg2 == cfg
    assert np.array_equal(loaded.image, batch.image)
    assert np.array_equal(loaded.text, batch.text)
    assert np.array_equal(loaded.labels, batch.labels)
    assert np.array_equal(loaded.corrupted, batch.corrupted)
    assert csv_path.read_text().splitlines()[0].startswith("img_0,")


def test_recall_examples():
    e = np.eye(6)
    assert recall_at_k(e, e, "sphere_neg_inner", 1) == (1.0, 1.0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 4))
    assert recall_at_k(x, rng.standard_normal((6, 4)), "euclidean_l2", 6) == (1.0, 1.0)
    with pytest.raises(ValueError):
        recall_at_k(x, x, "euclidean_l2", 7)


def test_recall_ties_go_to_lower_index():
    sims = np.ones((3, 2))
    # every candidate ties, so only query 0 finds its partner at rank 0
    assert recall_at_k(sims, sims, "sphere_neg_inner", 1) == (pytest.approx(1 / 3), pytest.approx(1 / 3))


def test_random_embeddings_recall_is_chance():
    b, reps = 32, 400
    rng = np.random.default_rng(1)
    vals = []
    for _ in range(reps):
        u = rng.standard_normal((b, 8))
        v = rng.standard_normal((b, 8))
        vals.append(recall_at_k(u / np.linalg.norm(u, axis=1, keepdims=True),
                                v / np.linalg.norm(v, axis=1, keepdims=True), "sphere_neg_inner", 1)[0])
    se = math.sqrt((1 / b) * (1 - 1 / b) / (b * reps))
    assert abs(np.mean(vals) - 1 / b) < 3 * se


def test_histograms():
    p = np.tile(np.eye(4)[None, :, :2], (5, 1, 1))  # identical (5, 4, 2) oblique batch
    h = distance_histograms([(p, p)], "oblique_neg_trace", bins=10)
    for name in ("pos", "neg", "img_neg", "txt_neg"):
        assert np.all(h[name]["values"] == -2.0)
        assert h[name]["counts"].sum() == h[name]["values"].size

    e = np.eye(8)
    u = np.stack([e[[2 * i, 2 * i + 1]] for i in range(4)])  # 4 points on Ob(8, 2), mutually orthogonal
    h = distance_histograms([(u, u)], "oblique_neg_trace")
    assert np.all(h["pos"]["values"] == -2.0) and np.all(h["neg"]["values"] == 0.0)
    assert h["pos"]["mean"] < h["neg"]["mean"]


def test_uniformity_alignment_examples():
    same = np.ones((5, 3))
    unif, align = uniformity_alignment(same)
    assert unif == 0.0 and align == 0.0
    x = np.random.default_rng(2).standard_normal((10, 3))
    assert uniformity_alignment(x, x.copy())[1] == 0.0


def test_uniformity_on_s3_matches_references():
    rng = np.random.default_rng(2024)
    x = rng.standard_normal((10_000, 4))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    u = uniformity(x)
    assert abs(u - S3_UNIFORMITY_MC_SEED2024) < 1e-12
    # seed-to-seed spread of this estimator is about 2e-4
    assert abs(u - S3_UNIFORMITY_QUADRATURE) < 1e-3


def test_token_subset_eval():
    rng = np.random.default_rng(3)
    u = rng.standard_normal((64, 4, 8))
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    v = u + 0.3 * rng.standard_normal(u.shape)
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    full = recall_at_k(u, v, "oblique_neg_trace", 1)
    r = token_subset_eval(u, v, 4)
    assert (r.i2t_mean, r.t2i_mean) == full and r.i2t_std == 0.0
    with pytest.raises(ValueError):
        token_subset_eval(u, v, 0)
    with pytest.raises(ValueError):
        token_subset_eval(u, v, 5)


def test_false_negative_rate_matches_expectation():
    cfg = GeneratorConfig(num_classes=16, seed=4)
    rates = [false_negative_rate(generate(cfg, 64, split=f"b{i}")) for i in range(300)]
    # each batch has 64*63 correlated pairs; the spread is estimated from the batches themselves
    se = np.std(rates) / math.sqrt(len(rates))
    assert abs(np.mean(rates) - expected_false_negative_rate(16)) < 4 * se
