from __future__ import annotations

import csv
import json
from typing import TYPE_CHECKING

import numpy as np
import pytest
import torch

from kifsod import (
    AnnotatedImage,
    Augmentation,
    ClassifierKind,
    ConfigurationError,
    DataError,
    Detector,
    NumericalError,
    ShapeError,
    TrainConfig,
    center_embeddings,
    compute_loss,
    detect,
    extract_instance_features,
    forward,
    load_checkpoint,
    pretrain_base,
    save_checkpoint,
)
from kifsod._detector import (
    _prepare_batch,
    apply_dropout,
    assign_rois,
    decode_boxes,
    encode_boxes,
    roi_losses,
    write_loss_log,
)

if TYPE_CHECKING:
    from pathlib import Path


def _state_equal(a: torch.nn.Module, b: torch.nn.Module) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def test_detector_layout(detector: Detector) -> None:
    assert detector.classifier.weight.shape == (9, 64)
    assert detector.background_row == 8
    assert detector.regressor.out_features == 4
    assert detector.base_ids == tuple(range(8))
    assert detector.row_of(3) == 3
    with pytest.raises(DataError):
        detector.row_of(11)
    with pytest.raises(ConfigurationError):
        Detector(range(8), image_size=60)
    with pytest.raises(ConfigurationError):
        Detector(range(8), novel_ids=(9,))
    assert _state_equal(Detector(range(8), image_size=64, seed=0), detector)


@pytest.mark.parametrize("cap", [1, 8, 32, 64])
def test_forward_cap(detector: Detector, base_images: list[AnnotatedImage], cap: int) -> None:
    out = forward(detector, base_images[0].pixels, cap)
    n = out.proposals.shape[0]
    assert 1 <= n <= cap
    assert out.objectness.shape == (n,)
    assert out.embeddings.shape == (n, 64)
    assert out.class_logits.shape == (n, 9)
    assert out.box_deltas.shape == (n, 4)
    assert not out.class_logits.requires_grad
    probs = torch.softmax(out.class_logits, dim=1).sum(dim=1)
    assert torch.allclose(probs, torch.ones(n), atol=1e-6)


def test_forward_deterministic(detector: Detector, base_images: list[AnnotatedImage]) -> None:
    a = forward(detector, base_images[1].pixels, 32)
    b = forward(detector, base_images[1].pixels, 32)
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_zero_classifier_is_uniform(
    detector: Detector, base_images: list[AnnotatedImage]
) -> None:
    with torch.no_grad():
        detector.classifier.weight.zero_()
        detector.classifier.bias.zero_()
    out = forward(detector, base_images[0].pixels, 32)
    probs = torch.softmax(out.class_logits, dim=1)
    assert torch.allclose(probs, torch.full_like(probs, 1 / 9))


def test_forward_errors(detector: Detector) -> None:
    with pytest.raises(ShapeError):
        forward(detector, np.zeros((32, 32, 3)), 8)
    with pytest.raises(ConfigurationError):
        forward(detector, np.zeros((64, 64, 3)), 8, dropout_rate=1.0, training=True)
    with pytest.raises(ConfigurationError):
        forward(detector, np.zeros((64, 64, 3)), 0)


def test_training_forward_dropout(detector: Detector) -> None:
    pixels = np.random.default_rng(0).random((64, 64, 3))
    gen = torch.Generator().manual_seed(0)
    out = forward(detector, pixels, 16, dropout_rate=0.5, training=True, generator=gen)
    assert out.class_logits.requires_grad
    gen = torch.Generator().manual_seed(0)
    again = forward(detector, pixels, 16, dropout_rate=0.5, training=True, generator=gen)
    assert torch.equal(out.class_logits, again.class_logits)
    # dropout applies to the embeddings only in training mode
    plain = forward(detector, pixels, 16, dropout_rate=0.5)
    assert torch.equal(plain.embeddings, forward(detector, pixels, 16).embeddings)


def test_apply_dropout_statistics() -> None:
    x = torch.ones(200_000)
    out = apply_dropout(x, 0.8, torch.Generator().manual_seed(1))
    zeros = float((out == 0).float().mean())
    assert zeros == pytest.approx(0.8, abs=0.01)
    kept = out[out != 0]
    assert torch.allclose(kept, torch.full_like(kept, 5.0))
    assert float(out.mean()) == pytest.approx(1.0, abs=0.02)
    assert apply_dropout(x, 0.0) is x


def test_cosine_classifier_scale_invariant() -> None:
    detector = Detector(range(8), image_size=64, classifier_kind="cosine")
    emb = torch.rand(6, 64, generator=torch.Generator().manual_seed(2)) + 0.1
    with torch.no_grad():
        a, b = detector.classify(emb), detector.classify(emb * 3.7)
    assert torch.allclose(a, b, atol=1e-5)
    assert float(a.abs().max()) <= 20.0 + 1e-4


def test_box_codec_round_trip() -> None:
    anchors = torch.tensor([[0.0, 0.0, 32.0, 32.0], [10.0, 20.0, 30.0, 60.0]])
    boxes = torch.tensor([[2.0, 4.0, 30.0, 28.0], [12.0, 18.0, 40.0, 50.0]])
    weights = (10.0, 10.0, 5.0, 5.0)
    decoded = decode_boxes(anchors, encode_boxes(anchors, boxes, weights), weights)
    assert torch.allclose(decoded, boxes, atol=1e-4)


def test_assign_rois() -> None:
    gt = torch.tensor([[0.0, 0.0, 20.0, 20.0]])
    rois = torch.tensor(
        [
            [0.0, 0.0, 20.0, 20.0],  # positive
            [40.0, 40.0, 60.0, 60.0],  # background
            [0.0, 0.0, 20.0, 50.0],  # IoU 0.4: ignored
        ]
    )
    labels, targets = assign_rois(rois, gt, torch.tensor([5]), background_row=8)
    assert labels.tolist() == [5, 8, -1]
    assert torch.allclose(targets[0], torch.zeros(4), atol=1e-6)


def test_roi_losses_oracles() -> None:
    deltas = torch.tensor([[0.1, -0.2, 0.3, 0.0], [0.0, 0.0, 0.0, 0.0]])
    logits = torch.full((2, 9), -50.0)
    logits[0, 3] = 50.0
    logits[1, 8] = 50.0
    labels = torch.tensor([3, 8])
    l_cls, l_loc = roi_losses(logits, deltas, labels, deltas.clone(), 8)
    assert float(l_cls) <= 1e-6
    assert float(l_loc) == 0.0

    # no positive RoI: the localization term is exactly zero
    _, l_loc = roi_losses(logits, deltas, torch.tensor([8, -1]), torch.ones(2, 4), 8)
    assert float(l_loc) == 0.0
    l_cls, l_loc = roi_losses(logits, deltas, torch.tensor([-1, -1]), torch.ones(2, 4), 8)
    assert float(l_cls) == 0.0 and float(l_loc) == 0.0


def test_compute_loss(detector: Detector, base_images: list[AnnotatedImage]) -> None:
    terms = compute_loss(detector, base_images[:2], 32)
    assert all(np.isfinite(v) and v >= 0 for v in terms.as_floats())
    assert terms.total().requires_grad
    with pytest.raises(DataError):
        compute_loss(detector, [], 32)
    empty = base_images[0].with_annotations([])
    with pytest.raises(DataError):
        compute_loss(detector, [empty], 32)


def _blank(boxes: tuple[tuple[float, float, float, float], ...]) -> AnnotatedImage:
    pixels = np.full((64, 64, 3), 0.5, dtype=np.float32)
    return AnnotatedImage(pixels=pixels, boxes=boxes, labels=(2,) * len(boxes))


def test_compute_loss_regresses_matched_proposals_only(detector: Detector) -> None:
    with torch.no_grad():
        detector.proposal.weight.zero_()
        detector.proposal.bias.zero_()
        detector.regressor.bias.fill_(1.0)

    # every proposal is an unshifted 32x32 anchor, far below IoU 0.5 with a 4x4 box
    terms = compute_loss(detector, [_blank(((30.0, 30.0, 34.0, 34.0),))], 64)
    assert terms.L_loc.item() == 0.0
    assert terms.L_cls.item() > 0.0

    # a box that coincides with an anchor is matched and regressed
    terms = compute_loss(detector, [_blank(((20.0, 20.0, 52.0, 52.0),))], 64)
    assert terms.L_loc.item() > 0.0


def test_prepare_batch_flips(detector: Detector, base_images: list[AnnotatedImage]) -> None:
    batch = base_images[:6]
    augmentation = Augmentation(scale_range=(1.0, 1.0), flip_probability=0.5)
    rng = np.random.default_rng(5)
    draws = [augmentation.draw(rng) for _ in batch]

    # the flips follow the augmentation draws
    images, boxes, rows = _prepare_batch(
        detector, batch, augmentation, np.random.default_rng(5)
    )
    assert [r.tolist() for r in rows] == [list(im.labels) for im in batch]
    for image, pixels, got, (_, flip) in zip(batch, images, boxes, draws):
        raw = torch.from_numpy(np.ascontiguousarray(image.pixels.transpose(2, 0, 1)))
        want = torch.tensor(image.boxes, dtype=got.dtype)
        if flip:
            raw = raw.flip(-1)
            want = torch.stack([64 - want[:, 2], want[:, 1], 64 - want[:, 0], want[:, 3]], 1)
        assert torch.equal(pixels, raw)
        assert torch.allclose(got, want)

    half = Augmentation(scale_range=(0.5, 0.5), flip_probability=0.0)
    images, boxes, _ = _prepare_batch(detector, batch[:1], half, None)
    assert images.shape == (1, 3, 32, 32)
    assert torch.allclose(boxes[0], torch.tensor(batch[0].boxes) * 0.5)


def test_center_embeddings(detector: Detector, base_images: list[AnnotatedImage]) -> None:
    image = base_images[0]
    before = forward(detector, image.pixels, 16)
    offset = center_embeddings(detector, base_images[:10])
    after = forward(detector, image.pixels, 16)

    assert np.abs(offset).sum() > 0
    assert np.allclose(detector.embedding_center.offset.double().numpy(), offset)
    assert torch.allclose(after.embeddings, before.embeddings - detector.embedding_center.offset)
    # the base learner absorbs the shift
    assert torch.allclose(after.class_logits, before.class_logits, atol=1e-5)
    assert torch.allclose(after.box_deltas, before.box_deltas, atol=1e-5)

    identity = Augmentation.identity()
    groups: dict[int, list[np.ndarray]] = {}
    for im in base_images[:10]:
        for label, z in extract_instance_features(detector, im, 1, 0, augmentation=identity):
            groups.setdefault(label, []).append(z)
    means = [np.mean(v, axis=0) for v in groups.values()]
    assert np.allclose(np.mean(means, axis=0), 0.0, atol=1e-4)

    with pytest.raises(ConfigurationError):
        center_embeddings(Detector(range(8), image_size=64, classifier_kind="cosine"), [image])
    with pytest.raises(DataError):
        center_embeddings(detector, [image.with_annotations([])])


def test_compute_loss_gradient_stop(
    detector: Detector, base_images: list[AnnotatedImage]
) -> None:
    terms = compute_loss(detector, base_images[:2], 32, gradient_stop_rpn=True)
    terms.L_rpn.backward()
    assert all(p.grad is None for p in detector.backbone.parameters())
    assert detector.proposal.weight.grad is not None

    detector.zero_grad(set_to_none=True)
    terms = compute_loss(detector, base_images[:2], 32)
    terms.L_rpn.backward()
    grads = [p.grad for p in detector.backbone.parameters()]
    assert all(g is not None for g in grads)
    assert any(float(g.abs().sum()) > 0 for g in grads)


def test_compute_loss_nan(detector: Detector, base_images: list[AnnotatedImage]) -> None:
    with torch.no_grad():
        detector.classifier.weight.fill_(float("nan"))
    with pytest.raises(NumericalError) as exc:
        compute_loss(detector, base_images[:1], 32, iteration=7)
    assert exc.value.component == "L_cls"
    assert exc.value.iteration == 7
    assert "L_cls" in str(exc.value)


def test_gradient_matches_finite_differences(base_images: list[AnnotatedImage]) -> None:
    detector = Detector(range(8), image_size=64, seed=1).double()
    batch = base_images[:1]

    def loss() -> torch.Tensor:
        return compute_loss(detector, batch, 16).total()

    detector.zero_grad()
    loss().backward()
    weight = detector.classifier.weight
    analytic = weight.grad.flatten()[:100].clone()

    step = 1e-4
    numeric = torch.zeros(100, dtype=torch.float64)
    flat = weight.data.view(-1)
    with torch.no_grad():
        for i in range(100):
            orig = flat[i].item()
            flat[i] = orig + step
            up = loss().item()
            flat[i] = orig - step
            down = loss().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * step)
    assert torch.allclose(analytic, numeric, rtol=1e-3, atol=1e-7)


def test_extract_instance_features(detector: Detector) -> None:
    image = AnnotatedImage(
        image_id=3,
        pixels=np.random.default_rng(3).random((64, 64, 3)),
        boxes=((4, 4, 28, 28), (30, 30, 60, 62)),
        labels=(1, 2),
    )
    feats = extract_instance_features(detector, image, 10, seed=0)
    assert len(feats) == 20
    assert [c for c, _ in feats[:4]] == [1, 2, 1, 2]
    assert all(v.shape == (64,) and v.dtype == np.float64 for _, v in feats)
    again = extract_instance_features(detector, image, 10, seed=0)
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(feats, again))

    single = extract_instance_features(
        detector, image, 1, seed=0, augmentation=Augmentation.identity()
    )
    assert len(single) == 2
    # classes the detector does not know are embedded all the same
    novel = AnnotatedImage(
        image_id=3, pixels=image.pixels, boxes=image.boxes, labels=(8, 9)
    )
    assert [c for c, _ in extract_instance_features(detector, novel, 1, seed=0)] == [8, 9]

    with pytest.raises(DataError):
        extract_instance_features(detector, image.with_annotations([]), 1, seed=0)
    with pytest.raises(ConfigurationError):
        extract_instance_features(detector, image, 0, seed=0)


def test_detect(detector: Detector, base_images: list[AnnotatedImage]) -> None:
    out = detect(detector, base_images[0].pixels, proposal_cap=16, max_detections=10)
    n = len(out.scores)
    assert n <= 10
    assert out.boxes.shape == (n, 4)
    assert out.labels.shape == (n,)
    assert set(out.labels.tolist()) <= set(detector.class_ids)
    assert np.all((out.scores > 0.05) & (out.scores <= 1.0))
    assert np.all(out.boxes >= 0) and np.all(out.boxes <= 64)
    assert len(out.proposals) <= 16


def test_pretrain_base(base_images: list[AnnotatedImage], tmp_path: Path) -> None:
    config = TrainConfig(iterations=3, batch_size=2, warmup_iterations=1, log_interval=2)
    first = pretrain_base(base_images, config, base_ids=range(8))
    second = pretrain_base(base_images, config, base_ids=range(8))
    assert first.detector.class_ids == tuple(range(8))
    assert _state_equal(first.detector, second.detector)
    assert [r.iteration for r in first.log] == [2, 3]
    assert first.log == second.log
    assert not first.detector.training
    assert float(first.detector.embedding_center.offset.abs().sum()) > 0

    plain = pretrain_base(
        base_images, config.replace(center_embedding=False), base_ids=range(8)
    )
    assert plain.log == first.log
    assert not plain.detector.embedding_center.offset.any()

    path = write_loss_log(first.log, tmp_path / "losses.csv")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "L_rpn", "L_cls", "L_loc"]
    assert len(rows) == 3


def test_pretrain_errors(
    base_images: list[AnnotatedImage], novel_images: list[AnnotatedImage]
) -> None:
    config = TrainConfig(iterations=1, batch_size=1)
    with pytest.raises(DataError, match="non-base"):
        pretrain_base(base_images + novel_images, config, base_ids=range(8))
    with pytest.raises(DataError):
        pretrain_base([image.with_annotations([]) for image in base_images[:2]], config)


def test_checkpoint_round_trip(tmp_path: Path) -> None:
    detector = Detector(range(12), novel_ids=(8, 9, 10, 11), image_size=64, seed=4)
    detector.classifier_kind = ClassifierKind.COSINE
    with torch.no_grad():
        detector.embedding_center.offset.fill_(0.25)
    path = save_checkpoint(detector, tmp_path / "model.ckpt", config={"note": "x"})
    loaded, header = load_checkpoint(path)
    assert _state_equal(loaded, detector)
    assert loaded.class_ids == detector.class_ids
    assert loaded.novel_ids == (8, 9, 10, 11)
    assert loaded.classifier_kind is ClassifierKind.COSINE
    assert header["config"] == {"note": "x"}
    assert header["embed_dim"] == 64
    assert set(header["components"]) == {
        "backbone",
        "proposal",
        "roi_head",
        "classifier",
        "regressor",
    }

    # the header is plain JSON after the magic and length
    raw = path.read_bytes()
    assert raw[:8] == b"KIFSODCK"
    n = int.from_bytes(raw[8:16], "little")
    assert json.loads(raw[16 : 16 + n])["class_ids"] == list(range(12))


def test_checkpoint_errors(tmp_path: Path, detector: Detector) -> None:
    with pytest.raises(DataError, match="does not exist"):
        load_checkpoint(tmp_path / "missing.ckpt")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(DataError, match="not a kifsod checkpoint"):
        load_checkpoint(bad)
    path = save_checkpoint(detector, tmp_path / "ok.ckpt")
    truncated = tmp_path / "truncated.ckpt"
    truncated.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(truncated)
