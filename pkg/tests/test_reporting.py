import json

import numpy as np
import pytest

from dynvla.harness import ASRMatrix, MethodComparison, SweepCurve
from dynvla.reporting import (
    comparison_report,
    csv_to_rates,
    curve_plot,
    delta_csv,
    heatmap,
    matrix_to_csv,
    save_matrix,
    save_sweep,
    write_output_manifest,
)


def mk_matrix(seed=0, runs=3, method="pgd"):
    rng = np.random.default_rng(seed)
    names = ("qf_small", "qf_wide", "mlp_small")
    return ASRMatrix(
        surrogate_ids=names,
        target_ids=names,
        per_run_rates=rng.random((3, 3, runs)),
        sample_count=64,
        run_seeds=tuple(range(runs)),
        method=method,
        task="classification",
        target_text="unknown",
    )


class TestCsv:
    def test_round_trip_exact(self):
        m = mk_matrix()
        surrogates, targets, rates = csv_to_rates(matrix_to_csv(m))
        assert surrogates == m.surrogate_ids
        assert targets == m.target_ids
        np.testing.assert_array_equal(rates, m.rates)

    def test_rejects_foreign_csv(self):
        with pytest.raises(ValueError):
            csv_to_rates("a,b\n1,2\n")


class TestArtifacts:
    def test_save_matrix_and_sidecar(self, tmp_path):
        m = mk_matrix()
        paths = save_matrix(m, tmp_path, "asr_pgd")
        sidecar = json.loads((tmp_path / "asr_pgd.json").read_text())
        assert sidecar["sample_count"] == 64
        assert ["qf_small", "qf_small"] in sidecar["white_box_cells"]
        assert all(p.exists() for p in paths)

    def test_heatmap_svg_is_byte_stable(self, tmp_path):
        m = mk_matrix()
        heatmap(m, tmp_path / "a.svg")
        heatmap(m, tmp_path / "b.svg")
        a = (tmp_path / "a.svg").read_bytes()
        assert a == (tmp_path / "b.svg").read_bytes()
        assert b"<svg" in a

    def test_heatmap_orientation_rows_are_surrogates(self, tmp_path):
        m = mk_matrix()
        heatmap(m, tmp_path / "m.svg")
        text = (tmp_path / "m.svg").read_text()
        assert "surrogate model" in text and "target model" in text

    def test_curve_plot_and_sweep_files(self, tmp_path):
        curve = SweepCurve(
            parameter="steps",
            points={200: 0.1, 400: 0.2},
            per_target={200: {"b": 0.1}, 400: {"b": 0.2}},
            surrogate="a",
            method="dynvla",
        )
        paths = save_sweep(curve, tmp_path, "sweep_dynvla")
        assert all(p.exists() for p in paths)
        payload = json.loads((tmp_path / "sweep_dynvla.json").read_text())
        assert payload["points"]["200"] == 0.1
        curve_plot({"dynvla": curve}, tmp_path / "c.svg", "steps", "t")
        assert (tmp_path / "c.svg").exists()

    def test_output_manifest_hashes_everything(self, tmp_path):
        (tmp_path / "x.txt").write_text("hello")
        (tmp_path / "sub").mkdir()
        (tmp_path / "sub" / "y.csv").write_text("a,b\n")
        write_output_manifest(tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert set(manifest["files"]) == {"x.txt", "sub/y.csv"}
        import hashlib

        assert manifest["files"]["x.txt"] == hashlib.sha256(b"hello").hexdigest()


class TestComparisonReport:
    def test_report_structure(self):
        comp = MethodComparison(
            matrices={"pgd": mk_matrix(1), "dynvla": mk_matrix(2, method="dynvla")},
            baseline="pgd",
        )
        text = comparison_report(comp)
        assert "baseline = pgd" in text
        assert "white-box (diagonal)" in text
        assert "sign test" in text
        assert "*" in text  # diagonal marker

    def test_delta_csv_matches_rate_difference(self):
        comp = MethodComparison(
            matrices={"pgd": mk_matrix(1), "dynvla": mk_matrix(2, method="dynvla")},
            baseline="pgd",
        )
        _, _, rates = csv_to_rates(delta_csv(comp, "dynvla"))
        np.testing.assert_array_equal(
            rates, comp.matrices["dynvla"].rates - comp.matrices["pgd"].rates
        )
