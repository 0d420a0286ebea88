import json

import numpy as np
import pytest

from dynvla.corpus import (
    BACKGROUNDS,
    COLORS,
    DEFAULT_TARGET_TEXTS,
    SHAPES,
    TASK_CAPTIONING,
    TASK_CLASSIFICATION,
    TASK_VQA_GENERAL,
    TASK_VQA_SPECIFIC,
    TASKS,
    assign_prompts,
    generate_corpus,
    load_corpus,
    load_prompt_fixtures,
    save_corpus,
)
from dynvla.errors import FixtureError, ValidationError


class TestGenerateCorpus:
    def test_same_seed_byte_identical(self):
        a = generate_corpus(64, seed=5)
        b = generate_corpus(64, seed=5)
        np.testing.assert_array_equal(a.images, b.images)
        assert a.records == b.records
        assert a.train_ids == b.train_ids and a.held_ids == b.held_ids

    def test_different_seed_differs(self):
        a = generate_corpus(64, seed=5)
        b = generate_corpus(64, seed=6)
        assert not np.array_equal(a.images, b.images)

    def test_split_disjoint_and_complete(self):
        c = generate_corpus(100, seed=1)
        train, held = set(c.train_ids), set(c.held_ids)
        assert not train & held
        assert len(train) + len(held) == 100
        assert len(held) == 10

    def test_full_coverage_in_3000_scenes(self):
        c = generate_corpus(3000, seed=7)
        seen = {(r.scene.shape, r.scene.color) for r in c.records}
        assert len(seen) == len(SHAPES) * len(COLORS)

    def test_no_caption_contains_a_target_text(self):
        c = generate_corpus(500, seed=2)
        for r in c.records:
            for target in DEFAULT_TARGET_TEXTS:
                assert target not in r.caption
                assert all(target not in a for a in r.answers.values())

    def test_pixels_are_8bit_quantized_in_unit_range(self):
        c = generate_corpus(32, seed=3)
        assert c.images.min() >= 0.0 and c.images.max() <= 1.0
        as_bytes = c.images * 255.0
        np.testing.assert_allclose(as_bytes, np.round(as_bytes), atol=1e-5)

    def test_shape_fits_above_ticker(self):
        from dynvla.corpus import TICKER_TOP

        c = generate_corpus(300, seed=4)
        for r in c.records:
            s = r.scene
            assert s.size + 1 < s.cx < 31 - s.size
            assert s.size + 1 < s.cy < TICKER_TOP - s.size - 1
            assert s.background in BACKGROUNDS and s.color in COLORS

    def test_size_zero_rejected(self):
        with pytest.raises(ValidationError):
            generate_corpus(0, seed=0)


class TestLabelTicker:
    def test_encode_decode_round_trip(self):
        from dynvla.corpus import decode_label_strip, encode_label_strip

        for label, override in [("hello", False), ("it's a test", True), ("abcd", True)]:
            strip = encode_label_strip(label, override)
            back, flag = decode_label_strip(strip)
            assert back == label and flag == override

    def test_rendered_scene_ticker_decodes(self):
        from dynvla.corpus import TICKER_TOP, decode_label_strip, render_scene

        c = generate_corpus(50, seed=11)
        for r in c.records[:20]:
            img = np.round(c.image(r.image_id) * 255).astype(np.uint8)
            label, override = decode_label_strip(img[TICKER_TOP:])
            assert label == r.scene.label
            assert override == r.scene.override

    def test_labels_never_contain_targets(self):
        c = generate_corpus(500, seed=12)
        for r in c.records:
            for t in DEFAULT_TARGET_TEXTS:
                assert t not in r.scene.label

    def test_override_scenes_answer_with_label(self):
        from dynvla.corpus import TASK_TRANSCRIBE

        c = generate_corpus(200, seed=13)
        overrides = [r for r in c.records if r.scene.override]
        normals = [r for r in c.records if not r.scene.override]
        assert overrides and normals
        for r in overrides:
            assert r.answers[TASK_CLASSIFICATION] == r.scene.label
            assert r.answers[TASK_CAPTIONING] == r.scene.label
        for r in normals:
            assert r.answers[TASK_CLASSIFICATION] == r.scene.shape
            assert r.answers[TASK_CAPTIONING] == r.caption
        for r in c.records:
            assert r.answers[TASK_TRANSCRIBE] == r.scene.label

    def test_label_too_long_rejected(self):
        from dynvla.corpus import encode_label_strip

        with pytest.raises(ValidationError):
            encode_label_strip("x" * 16, False)


class TestPromptFixtures:
    def test_classification_fixture_contains_known_prompt(self):
        ps = load_prompt_fixtures(TASK_CLASSIFICATION)
        assert "Identify the primary theme of this image in one word." in ps.prompts

    def test_all_fixtures_nonempty_single_lines(self):
        for task in TASKS:
            for source in ("appendix", "toy"):
                ps = load_prompt_fixtures(task, source=source)
                assert ps.prompts
                for p in ps.prompts:
                    assert p == p.strip() and p and "\n" not in p

    def test_vqa_specific_falls_back_to_toy(self):
        ps = load_prompt_fixtures(TASK_VQA_SPECIFIC, source="appendix")
        assert ps.source == "toy"

    def test_hash_mismatch_raises(self, tmp_path, monkeypatch):
        import dynvla.corpus as corpus_mod

        bad = tmp_path / "prompts_classification.txt"
        bad.write_text("tampered\n")
        monkeypatch.setattr(corpus_mod, "_FIXTURE_DIR", tmp_path)
        with pytest.raises(FixtureError):
            load_prompt_fixtures(TASK_CLASSIFICATION)

    def test_missing_fixture_raises(self, tmp_path, monkeypatch):
        import dynvla.corpus as corpus_mod

        monkeypatch.setattr(corpus_mod, "_FIXTURE_DIR", tmp_path)
        with pytest.raises(FixtureError):
            load_prompt_fixtures(TASK_CAPTIONING)


class TestAssignPrompts:
    def _sets(self):
        return {task: load_prompt_fixtures(task, source="toy") for task in TASKS}

    def test_single_prompt_single_image(self):
        c = generate_corpus(1, seed=0)
        sets = {TASK_VQA_GENERAL: load_prompt_fixtures(TASK_VQA_GENERAL, source="toy")}
        sets[TASK_VQA_GENERAL] = sets[TASK_VQA_GENERAL].__class__(
            task=TASK_VQA_GENERAL, prompts=("only prompt?",), source="toy", sha256=""
        )
        got = assign_prompts(c, sets, seed=1)
        assert got["img_00000"][TASK_VQA_GENERAL] == "only prompt?"

    def test_reproducible(self):
        c = generate_corpus(50, seed=1)
        sets = self._sets()
        assert assign_prompts(c, sets, 9) == assign_prompts(c, sets, 9)
        assert assign_prompts(c, sets, 9) != assign_prompts(c, sets, 10)

    def test_uniform_over_prompts(self):
        from scipy.stats import chi2 as chi2_dist

        c = generate_corpus(10_000, seed=2)
        sets = {TASK_CLASSIFICATION: load_prompt_fixtures(TASK_CLASSIFICATION, source="toy")}
        got = assign_prompts(c, sets, seed=3)
        prompts = sets[TASK_CLASSIFICATION].prompts
        counts = {p: 0 for p in prompts}
        for per_task in got.values():
            counts[per_task[TASK_CLASSIFICATION]] += 1
        expected = 10_000 / len(prompts)
        chi2 = sum((v - expected) ** 2 / expected for v in counts.values())
        assert chi2_dist.sf(chi2, len(prompts) - 1) > 0.01


class TestPersistence:
    def test_round_trip(self, tmp_path):
        c = generate_corpus(12, seed=8)
        save_corpus(c, tmp_path / "corpus")
        back = load_corpus(tmp_path / "corpus")
        np.testing.assert_array_equal(c.images, back.images)
        assert back.records == c.records
        assert back.train_ids == c.train_ids

    def test_save_is_byte_stable(self, tmp_path):
        c = generate_corpus(5, seed=8)
        save_corpus(c, tmp_path / "a")
        save_corpus(c, tmp_path / "b")
        for name in ["index.json", "images/img_00000.png", "images/img_00004.png"]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_index_is_valid_json(self, tmp_path):
        c = generate_corpus(3, seed=8)
        save_corpus(c, tmp_path / "c")
        idx = json.loads((tmp_path / "c" / "index.json").read_text())
        assert len(idx["records"]) == 3
