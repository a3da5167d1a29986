import csv

import numpy as np
import pytest

from dflgcn.gradsuite import tiny_model_config
from dflgcn.heads import DflModel
from dflgcn.nn import ShapeError
from dflgcn.visualize import export_maps, read_pgm, saliency_maps, write_pgm


@pytest.fixture
def model():
    return DflModel(tiny_model_config(esa=False, seed=0))


@pytest.fixture
def clip_x(rng):
    return rng.standard_normal((3, 40, 8))


class TestSaliencyMaps:
    def test_one_map_per_slot(self, model, clip_x):
        maps = saliency_maps(model, clip_x)
        assert [m.slot for m in maps] == [0, 1]
        assert all(m.curve.shape == (40,) and m.joint_map.shape == (8,) for m in maps)
        assert [m.segment for m in maps] == sorted(m.segment for m in maps)

    def test_non_negative(self, model, clip_x):
        for m in saliency_maps(model, clip_x):
            assert np.all(m.curve >= 0) and np.all(m.joint_map >= 0)

    def test_zero_weights_give_zero_maps(self, model, clip_x):
        for layer in model.layers():
            for p in layer.params.values():
                p[:] = 0
        for m in saliency_maps(model, clip_x):
            assert not m.curve.any() and not m.joint_map.any()

    @pytest.mark.parametrize("seed", range(5))
    def test_peak_inside_receptive_field(self, seed):
        model = DflModel(tiny_model_config(esa=False, seed=seed))
        x = np.random.default_rng(seed).standard_normal((3, 40, 8))
        for m in saliency_maps(model, x):
            lo, hi = m.receptive_field
            assert 0 <= lo < hi <= 40
            assert lo <= int(np.argmax(m.curve)) < hi
            assert not m.curve[:lo].any() and not m.curve[hi:].any()

    def test_joint_map_is_rf_average(self, model, clip_x):
        # both are means of the same |dx| block, taken in different orders
        for m in saliency_maps(model, clip_x):
            lo, hi = m.receptive_field
            assert m.joint_map.mean() == pytest.approx(m.curve[lo:hi].mean(), rel=1e-12)

    def test_does_not_disturb_model(self, model, clip_x):
        before = {k: v.copy() for k, v in model.named_params().items()}
        saliency_maps(model, clip_x)
        for k, v in model.named_params().items():
            assert v.tobytes() == before[k].tobytes()
        assert not any(g.any() for g in model.named_grads().values())

    def test_shape_mismatch(self, model):
        with pytest.raises(ShapeError):
            saliency_maps(model, np.zeros((3, 40, 25)))


class TestPgm:
    def test_round_trip_scaling(self, tmp_path):
        img = np.array([[0.0, 1.0, 2.0], [4.0, 3.0, 0.5]])
        write_pgm(tmp_path / "a.pgm", img)
        assert read_pgm(tmp_path / "a.pgm").tolist() == [[0, 64, 128], [255, 191, 32]]
        assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n3 2\n255\n")

    def test_all_zero_is_black(self, tmp_path):
        write_pgm(tmp_path / "z.pgm", np.zeros((2, 5)))
        assert not read_pgm(tmp_path / "z.pgm").any()

    def test_rejects_negative(self, tmp_path):
        with pytest.raises(ValueError):
            write_pgm(tmp_path / "n.pgm", np.array([[-1.0]]))


class TestExport:
    def test_files(self, model, clip_x, tmp_path):
        maps = saliency_maps(model, clip_x)
        names = [f"j{i}" for i in range(8)]
        written = export_maps(maps, tmp_path / "out", names)
        assert sorted(p.name for p in written) == sorted([
            "heat_curves.csv", "joint_maps.csv", "curve_slot0.pgm", "joints_slot0.pgm",
            "curve_slot1.pgm", "joints_slot1.pgm", "curves.pgm"])
        rows = list(csv.DictReader(open(tmp_path / "out" / "heat_curves.csv")))
        assert len(rows) == 2 * 40
        assert float(rows[3]["heat"]) == maps[0].curve[3]
        assert read_pgm(tmp_path / "out" / "curves.pgm").shape == (2, 40)
        jrows = list(csv.DictReader(open(tmp_path / "out" / "joint_maps.csv")))
        assert jrows[2]["name"] == "j2"

    def test_empty(self, tmp_path):
        with pytest.raises(ValueError):
            export_maps([], tmp_path)
