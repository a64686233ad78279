"""Model family construction, shape planning, and forward contracts."""
import numpy as np
import pytest

from amtennet.errors import ShapeError
from amtennet.extractors import ExtractorConfig
from amtennet.layers import AvgPool2d, MaxPool2d, softmax
from amtennet.models import build_ablation, build_amtennet, build_mini, from_build_args

TABLE_LADDER = [128, 128, 128, 128, 128, 128, 64, 62, 31, 29, 14, 14, 7]
TABLE_COUNTS = [3, 3, 3, 6, 6, 24, 48, 64, 128]


def rng(seed=0):
    return np.random.default_rng(seed)


class TestFullNetwork:
    def test_shape_plan_matches_published_table(self):
        model = build_amtennet(8, rng=rng())
        plan = model.shape_plan()
        assert plan.spatial_ladder() == TABLE_LADDER
        assert plan.kernel_counts() == TABLE_COUNTS

    def test_conv9_is_pointwise(self):
        model = build_amtennet(8, rng=rng())
        conv9 = [l for l in model.layers if l.name == "conv9"][0]
        assert conv9.p.kernel_size == 1

    @pytest.mark.parametrize("p", [2, 8])
    def test_output_neurons(self, p):
        model = build_amtennet(p, rng=rng())
        fc3 = [l for l in model.layers if l.name == "fc3"][0]
        assert fc3.weights.value.shape[1] == p

    def test_fewer_than_two_classes_rejected(self):
        with pytest.raises(ShapeError):
            build_amtennet(1, rng=rng())

    def test_too_small_input_names_failing_layer(self):
        with pytest.raises(ShapeError, match="pool"):
            build_amtennet(4, input_size=32, rng=rng())

    def test_classifier_widths(self):
        model = build_amtennet(8, rng=rng())
        fc1 = [l for l in model.layers if l.name == "fc1"][0]
        fc2 = [l for l in model.layers if l.name == "fc2"][0]
        assert fc1.weights.value.shape == (7 * 7 * 128, 300)
        assert fc2.weights.value.shape == (300, 300)


class TestAblations:
    def test_pooling_swap_has_no_max_pools(self):
        model = build_ablation(7, 4, rng=rng())
        assert not any(isinstance(l, MaxPool2d) for l in model.layers)
        assert sum(isinstance(l, AvgPool2d) for l in model.layers) == 4

    def test_conv9_swap_uses_3x3(self):
        model = build_ablation(8, 4, rng=rng())
        conv9 = [l for l in model.layers if l.name == "conv9"][0]
        assert conv9.p.kernel_size == 3 and conv9.p.padding == 1

    @pytest.mark.parametrize("ablation_id", [7, 8])
    def test_final_feature_map_still_7x7(self, ablation_id):
        plan = build_ablation(ablation_id, 4, rng=rng()).shape_plan()
        assert plan.spatial_ladder()[-1] == 7

    def test_unknown_id_rejected(self):
        with pytest.raises(ShapeError):
            build_ablation(9, 4, rng=rng())


class TestMini:
    def test_half_scale_widths(self):
        model = build_mini(4, scale=0.5, input_size=64, rng=rng())
        conv6 = [l for l in model.layers if l.name == "conv6"][0]
        assert conv6.p.out_channels == 12

    def test_trace_block_unchanged_by_scale(self):
        model = build_mini(4, scale=0.5, input_size=64, rng=rng())
        counts = [c.p.out_channels for c in
                  (model.extractor.conv1, model.extractor.conv2, model.extractor.conv3,
                   model.extractor.conv4, model.extractor.conv5)]
        assert counts == [3, 3, 3, 6, 6]

    @pytest.mark.parametrize("size", [40, 48, 64])
    def test_small_inputs_pass_shape_planning(self, size):
        model = build_mini(4, input_size=size, rng=rng())
        assert model.shape_plan().spatial_ladder()[-1] >= 1

    def test_forward_runs_end_to_end(self):
        model = build_mini(4, input_size=48, rng=rng())
        x = rng(1).uniform(size=(2, 3, 48, 48)).astype(np.float32)
        assert model.forward(x).shape == (2, 4)


class TestForwardContracts:
    def test_forward_pure_bit_identical(self):
        model = build_mini(4, input_size=40, rng=rng(2))
        x = rng(3).uniform(size=(3, 3, 40, 40)).astype(np.float32)
        a = model.forward(x)
        b = model.forward(x)
        assert np.array_equal(a, b)

    def test_predict_is_argmax_of_softmax(self):
        model = build_mini(4, input_size=40, rng=rng(4))
        x = rng(5).uniform(size=(5, 3, 40, 40)).astype(np.float32)
        logits = model.forward(x)
        assert np.array_equal(model.predict(x), softmax(logits).argmax(axis=1))
        assert np.array_equal(model.predict(x), logits.argmax(axis=1))

    def test_batch_of_n_gives_n_predictions(self):
        model = build_mini(4, input_size=40, rng=rng(6))
        x = rng(7).uniform(size=(7, 3, 40, 40)).astype(np.float32)
        assert model.predict(x).shape == (7,)

    def test_untrained_net_is_at_chance_on_random_data(self):
        model = build_mini(4, input_size=40, rng=rng(8))
        g = rng(9)
        x = g.uniform(size=(800, 3, 40, 40)).astype(np.float32)
        y = np.tile(np.arange(4), 200)
        acc = float((model.predict(x) == y).mean())
        assert abs(acc - 0.25) < 0.05


class TestParameterAccounting:
    def test_base_model_smaller_by_trace_block_and_fanin(self):
        net = build_amtennet(8, rng=rng(10))
        base = build_amtennet(8, ExtractorConfig(kind="none"), rng=rng(11))
        assert base.parameter_count() < net.parameter_count()
        trace_params = sum(p.value.size for p in net.extractor.params())
        # conv6 fan-in adapts to the extractor (15 vs 3 channels), so the
        # difference is the trace block plus the conv6 fan-in delta
        conv6_delta = 24 * (15 - 3) * 9
        assert net.parameter_count() - base.parameter_count() == trace_params + conv6_delta

    def test_extractor_swap_only_changes_conv6_fanin(self):
        net = build_amtennet(8, rng=rng(12))
        srm = build_amtennet(8, ExtractorConfig(kind="srm"), rng=rng(13))
        rows_net = {r.layer: r.out for r in net.shape_plan().rows if not r.layer.startswith("conv1")}
        rows_srm = {r.layer: r.out for r in srm.shape_plan().rows if r.layer in rows_net}
        for name in ("conv6", "pool6", "conv7", "conv9", "fc1", "fc3"):
            assert rows_net[name] == rows_srm[name]

    def test_rebuild_from_manifest(self):
        model = build_mini(4, input_size=48, rng=rng(14))
        clone = from_build_args(model.manifest()["build_args"], rng=rng(14))
        assert clone.name == model.name
        assert clone.shape_plan().spatial_ladder() == model.shape_plan().spatial_ladder()
        assert {p.name for p in clone.params()} == {p.name for p in model.params()}
