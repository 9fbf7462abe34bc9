import math

import pytest
import torch

from irblurdet.backbone import (
    BackboneConfig,
    DetectionBackbone,
    DetectionHead,
    LEVEL_SIZE_BOUNDS,
    assign_level,
    center_cells,
    decode_cell,
    decode_detections,
    encode_box,
    nms,
    HeadOutputs,
)
from irblurdet.errors import ConfigError, InvalidParameterError
from irblurdet.fsgm import FrequencyStructureGuidance
from irblurdet.metrics import box_iou


class TestBackboneShapes:
    def test_stem_downsamples_by_four(self):
        net = DetectionBackbone()
        f = net.stem_forward(torch.rand(2, 1, 96, 96))
        assert tuple(f.shape) == (2, 32, 24, 24)

    def test_stage_pyramid(self):
        net = DetectionBackbone()
        feats = net(torch.rand(1, 1, 96, 96))
        shapes = [tuple(m.shape) for m in feats]
        assert shapes == [
            (1, 32, 24, 24),
            (1, 64, 12, 12),
            (1, 128, 6, 6),
            (1, 256, 3, 3),
        ]

    def test_odd_input_sizes(self):
        net = DetectionBackbone()
        feats = net(torch.rand(1, 1, 97, 99))
        assert tuple(feats[0].shape) == (1, 32, 25, 25)
        assert len(feats) == 4

    def test_fixed_strides_enforced(self):
        with pytest.raises(ConfigError):
            BackboneConfig(stage_strides=(2, 2, 2, 2))

    def test_forward_without_guidance_is_plain_stage_stack(self):
        torch.manual_seed(0)
        net = DetectionBackbone()
        x = torch.rand(1, 1, 64, 64)
        feats = net(x)
        f = net.stem(x)
        for stage, out in zip(net.stages, feats):
            f = stage(f)
            assert torch.equal(f, out)

    def test_guidance_skipped_when_no_prior_given(self):
        torch.manual_seed(1)
        fsgm = FrequencyStructureGuidance(8, 32)
        with_g = DetectionBackbone(fsgm=fsgm)
        x = torch.rand(1, 1, 64, 64)
        feats = with_g(x)
        f = with_g.stem(x)
        for stage, out in zip(with_g.stages, feats):
            f = stage(f)
            assert torch.equal(f, out)

    def test_prior_without_guidance_module_rejected(self):
        net = DetectionBackbone()
        with pytest.raises(InvalidParameterError):
            net(torch.rand(1, 1, 64, 64), prior=torch.rand(1, 8, 16, 16))

    def test_prior_resolution_mismatch_rejected(self):
        net = DetectionBackbone(fsgm=FrequencyStructureGuidance(8, 32))
        with pytest.raises(InvalidParameterError):
            net(torch.rand(1, 1, 64, 64), prior=torch.rand(1, 8, 10, 10))

    def test_prior_changes_features(self):
        torch.manual_seed(2)
        net = DetectionBackbone(fsgm=FrequencyStructureGuidance(8, 32))
        x = torch.rand(1, 1, 64, 64)
        plain = net(x)
        guided = net(x, prior=torch.rand(1, 8, 16, 16))
        assert not torch.allclose(plain[0], guided[0])


class TestHead:
    def test_output_shapes_and_strides(self):
        net = DetectionBackbone()
        head = DetectionHead()
        out = head(net(torch.rand(2, 1, 96, 96)))
        assert out.strides == (4, 8, 16, 32)
        sizes = [24, 12, 6, 3]
        for lvl, s in enumerate(sizes):
            assert tuple(out.obj[lvl].shape) == (2, 1, s, s)
            assert tuple(out.box[lvl].shape) == (2, 4, s, s)

    def test_objectness_bias_starts_pessimistic(self):
        head = DetectionHead()
        out = head(DetectionBackbone()(torch.zeros(1, 1, 64, 64)))
        # rare-positive init: sigmoid of the bias sits near 0.01
        probs = torch.sigmoid(out.obj[0])
        assert probs.mean().item() < 0.2

    def test_outputs_finite(self):
        torch.manual_seed(3)
        net = DetectionBackbone()
        head = DetectionHead()
        out = head(net(torch.rand(1, 1, 96, 96) * 10))
        for t in out.obj + out.box:
            assert torch.isfinite(t).all()


class TestAssignment:
    @pytest.mark.parametrize(
        "side,expected",
        [(4, 0), (15.9, 0), (16, 1), (24, 1), (31.9, 1), (32, 2), (63.9, 2), (64, 3), (100, 3)],
    )
    def test_level_bounds(self, side, expected):
        assert assign_level((0, 0, side, 1)) == expected
        assert assign_level((0, 0, 1, side)) == expected

    def test_bounds_constant(self):
        assert LEVEL_SIZE_BOUNDS == (16, 32, 64)

    def test_encode_decode_roundtrip(self):
        rng = torch.Generator().manual_seed(4)
        for _ in range(50):
            vals = torch.rand(4, generator=rng)
            box = (
                float(vals[0] * 80),
                float(vals[1] * 80),
                float(vals[2] * 30 + 1),
                float(vals[3] * 30 + 1),
            )
            stride = 4
            cell = (int(vals[0] * 10), int(vals[1] * 10))
            dec = decode_cell(encode_box(box, stride, cell), stride, cell)
            for a, b in zip(dec, box):
                assert abs(a - b) <= 1e-4

    def test_decode_clamps_log_sizes(self):
        box = decode_cell((0.0, 0.0, 50.0, 50.0), 4, (0, 0))
        assert box[2] == pytest.approx(math.exp(6.0) * 4)

    def test_center_cells_exact_grid(self):
        # box center (14, 14), stride 4: the 3x3 block of cells whose
        # centers {10, 14, 18} fall inside the box and the 6px radius
        cells = center_cells((10, 10, 8, 8), 4, (24, 24))
        assert cells == [(i, j) for i in (2, 3, 4) for j in (2, 3, 4)]

    def test_center_cells_never_empty(self):
        rng = torch.Generator().manual_seed(5)
        for _ in range(100):
            vals = torch.rand(4, generator=rng)
            box = (
                float(vals[0] * 90),
                float(vals[1] * 90),
                float(vals[2] * 20 + 0.5),
                float(vals[3] * 20 + 0.5),
            )
            cells = center_cells(box, 8, (12, 12))
            assert len(cells) >= 1
            for i, j in cells:
                assert 0 <= i < 12 and 0 <= j < 12

    def test_center_cells_nearest_cell_contains_center(self):
        # tiny box between cell centers still claims its nearest cell
        cells = center_cells((17.8, 17.8, 0.5, 0.5), 4, (10, 10))
        assert (4, 4) in cells


def brute_nms(boxes, scores, thr):
    order = sorted(range(len(boxes)), key=lambda i: -scores[i])
    keep = []
    for i in order:
        if all(box_iou(boxes[i], boxes[k]) <= thr for k in keep):
            keep.append(i)
    return keep


class TestNms:
    def test_three_box_construction(self):
        a, b, c = (0, 0, 10, 10), (2.5, 0, 10, 10), (7, 3.94, 10, 10)
        assert box_iou(a, b) == pytest.approx(0.6, abs=1e-6)
        assert box_iou(a, c) == pytest.approx(0.1, abs=1e-3)
        assert box_iou(b, c) == pytest.approx(0.2, abs=1e-3)
        keep = nms([a, b, c], [0.9, 0.8, 0.7], 0.5)
        assert keep == [0, 2]
        keep = nms([a, b, c], [0.9, 0.8, 0.7], 0.05)
        assert keep == [0]
        # raising the threshold above every overlap keeps all three
        keep = nms([a, b, c], [0.9, 0.8, 0.7], 0.65)
        assert keep == [0, 1, 2]

    def test_matches_brute_force_on_random_instances(self):
        rng = torch.Generator().manual_seed(6)
        for trial in range(20):
            n = 12
            vals = torch.rand(n, 4, generator=rng)
            boxes = [
                (float(v[0] * 40), float(v[1] * 40), float(v[2] * 20 + 2), float(v[3] * 20 + 2))
                for v in vals
            ]
            scores = [float(s) for s in torch.rand(n, generator=rng)]
            for thr in (0.3, 0.5, 0.7):
                assert nms(boxes, scores, thr) == brute_nms(boxes, scores, thr)

    def test_empty_input(self):
        assert nms([], [], 0.5) == []


def one_hot_outputs(level, cell, logit, offsets, sizes=(24, 12, 6, 3)):
    obj = [torch.full((1, 1, s, s), -12.0) for s in sizes]
    box = [torch.zeros(1, 4, s, s) for s in sizes]
    i, j = cell
    obj[level][0, 0, i, j] = logit
    box[level][0, :, i, j] = torch.tensor(offsets)
    return HeadOutputs(obj=obj, box=box)


class TestDecodeDetections:
    def test_single_cell_decodes_to_expected_box(self):
        target = (30.0, 42.0, 8.0, 6.0)
        stride = 4
        cell = (10, 8)
        offs = encode_box(target, stride, cell)
        preds = one_hot_outputs(0, cell, 2.0, offs)
        dets = decode_detections(preds, (96, 96), score_threshold=0.3)
        assert len(dets) == 1 and len(dets[0]) == 1
        d = dets[0][0]
        assert d.score == pytest.approx(torch.sigmoid(torch.tensor(2.0)).item(), abs=1e-6)
        for got, want in zip(d.box, target):
            assert got == pytest.approx(want, abs=1e-3)

    def test_boxes_clipped_to_image(self):
        offs = encode_box((-5.0, -5.0, 12.0, 12.0), 4, (0, 0))
        preds = one_hot_outputs(0, (0, 0), 3.0, offs)
        dets = decode_detections(preds, (96, 96))
        (d,) = dets[0]
        x, y, w, h = d.box
        assert x >= 0 and y >= 0
        assert x + w <= 96 and y + h <= 96
        assert w == pytest.approx(7.0, abs=1e-3)

    def test_below_threshold_suppressed(self):
        preds = one_hot_outputs(0, (5, 5), -1.0, (0, 0, 0.5, 0.5))
        assert decode_detections(preds, (96, 96), score_threshold=0.5) == [[]]

    def test_nms_applied_across_levels(self):
        # the same physical box fired from two levels collapses to one
        box = (40.0, 40.0, 12.0, 12.0)
        preds = one_hot_outputs(0, (11, 11), 4.0, encode_box(box, 4, (11, 11)))
        preds.obj[1][0, 0, 5, 5] = 2.0
        preds.box[1][0, :, 5, 5] = torch.tensor(encode_box(box, 8, (5, 5)))
        dets = decode_detections(preds, (96, 96), iou_nms=0.5)
        assert len(dets[0]) == 1
        assert dets[0][0].score > 0.9

    def test_invalid_thresholds(self):
        preds = one_hot_outputs(0, (0, 0), 0.0, (0, 0, 0, 0))
        with pytest.raises(InvalidParameterError):
            decode_detections(preds, (96, 96), score_threshold=1.5)
        with pytest.raises(InvalidParameterError):
            decode_detections(preds, (96, 96), iou_nms=-0.1)

    def test_batch_independence(self):
        sizes = (24, 12, 6, 3)
        obj = [torch.full((2, 1, s, s), -12.0) for s in sizes]
        box = [torch.zeros(2, 4, s, s) for s in sizes]
        obj[0][1, 0, 3, 3] = 3.0
        preds = HeadOutputs(obj=obj, box=box)
        dets = decode_detections(preds, (96, 96))
        assert dets[0] == [] and len(dets[1]) == 1
