import json
from fractions import Fraction

import pytest

from elrt.flops import (
    LayerGeometry,
    layer_flops,
    model_reduction,
    resnet_cifar_geometry,
    training_reduction,
)
from elrt.models import RankConfig, apply_rank_config, build_resnet_cifar, builtin_rank_config


def reduction(depth, name):
    return model_reduction(resnet_cifar_geometry(depth, ranks=builtin_rank_config(name)))


class TestLayer:
    def test_dense_count(self):
        assert layer_flops(LayerGeometry(3, 16, 32, 8, 8)) == (3 * 3 * 16 * 32 * 64,) * 2

    def test_factorized_count(self):
        g = LayerGeometry(3, 16, 32, 8, 8, 4, 6)
        assert layer_flops(g)[1] == (16 * 4 + 9 * 4 * 6 + 32 * 6) * 64
        assert g.factorized_params() == 16 * 4 + 9 * 24 + 32 * 6

    def test_validation(self):
        with pytest.raises(ValueError):
            LayerGeometry(3, 0, 4, 1, 1)
        with pytest.raises(ValueError, match="together"):
            LayerGeometry(3, 2, 4, 1, 1, r1=2)
        with pytest.raises(ValueError, match="positive"):
            LayerGeometry(3, 2, 4, 1, 1, 0, 1)


class TestModelReduction:
    @pytest.mark.parametrize("depth,name,target,attr", [
        (20, "resnet20-flops1.98", 1.98, "inference_reduction"),
        (20, "resnet20-flops3.02", 3.02, "inference_reduction"),
        (20, "resnet20-params6.01", 6.01, "param_reduction"),
        (56, "resnet56-flops2.05", 2.05, "inference_reduction"),
        (56, "resnet56-flops2.52", 2.52, "inference_reduction"),
    ])
    def test_reference_ratios(self, depth, name, target, attr):
        value = getattr(reduction(depth, name), attr)
        assert abs(value / target - 1) <= 0.05

    def test_training_equals_inference(self):
        for depth, name in [(20, "resnet20-flops1.98"), (20, "resnet20-flops3.02"),
                            (20, "resnet20-params6.01"), (56, "resnet56-flops2.05")]:
            rep = reduction(depth, name)
            assert rep.training_reduction == rep.inference_reduction
            assert rep.inference_reduction == float(Fraction(rep.dense_flops, rep.factorized_flops))

    def test_no_ranks_is_unity(self):
        rep = model_reduction(resnet_cifar_geometry(20))
        assert rep.inference_reduction == rep.param_reduction == rep.training_reduction == 1.0

    def test_geometry_matches_model(self):
        cfg = builtin_rank_config("resnet20-flops1.98")
        model = apply_rank_config(build_resnet_cifar(20), cfg)
        a = model_reduction(model.layer_geometries())
        b = model_reduction(resnet_cifar_geometry(20, ranks=cfg))
        assert (a.dense_flops, a.factorized_flops) == (b.dense_flops, b.factorized_flops)

    def test_unknown_layer(self):
        with pytest.raises(KeyError):
            resnet_cifar_geometry(20, ranks=RankConfig({"layer9.0.conv1": (1, 1)}))

    def test_empty(self):
        with pytest.raises(ValueError):
            model_reduction([])

    def test_outputs(self):
        rep = reduction(20, "resnet20-flops1.98")
        table = rep.to_table()
        assert "inference FLOPs reduction" in table and "layer1.0.conv1" in table
        d = json.loads(rep.to_json())
        assert d["inference_reduction"] == rep.inference_reduction
        assert len(d["layers"]) == 20


class TestTrainingReduction:
    def test_formulas(self):
        assert training_reduction("dense", 10) == 1.0
        assert training_reduction("elrt", 10, 4) == 2.5
        assert training_reduction("growefficient", 10, 4) == 30 / 24
        assert training_reduction("backsparse", 10, 4) == 30 / 16
        assert training_reduction("pruning", 10, 4, 100, 50) == 3000 / (3000 + 600)
        assert training_reduction("lowrank-comp", 10, 5, 200, 200) == pytest.approx(6000 / 9000)

    def test_pretrain_methods_below_one(self):
        assert training_reduction("pruning", 10, 1, 200, 1) < 1

    def test_errors(self):
        with pytest.raises(ValueError, match="unknown method"):
            training_reduction("magic", 1, 1)
        with pytest.raises(ValueError, match="compact"):
            training_reduction("elrt", 1)
        with pytest.raises(ValueError, match="epochs"):
            training_reduction("pruning", 1, 1)
        with pytest.raises(ValueError):
            training_reduction("elrt", 0, 1)
        with pytest.raises(ValueError):
            training_reduction("pruning", 1, 1, 0, 1)
