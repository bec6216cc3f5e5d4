import json

import numpy as np
import pytest

from groundedit import (
    BoundingBox,
    EditSpec,
    FrameLoadError,
    FrameSequence,
    GroundingEntity,
    GroundingFormatError,
    VideoGrounding,
    apply_edit_spec,
    load_frames,
    parse_groundings,
    save_frames,
    serialize_groundings,
    validate_grounding,
)

from conftest import make_clip, uniform_grounding


class TestFrameSequence:
    def test_valid(self):
        clip = make_clip(3, 16)
        assert clip.frame_count == 3
        assert clip.resolution == (16, 16)
        assert not clip.frames.flags.writeable

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            FrameSequence(np.full((2, 4, 4, 3), 1.5))

    def test_non_finite_rejected(self):
        bad = np.zeros((1, 4, 4, 3))
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            FrameSequence(bad)

    def test_wrong_rank_rejected(self):
        with pytest.raises(ValueError):
            FrameSequence(np.zeros((4, 4, 3)))

    def test_from_list_inconsistent_resolutions(self):
        with pytest.raises(FrameLoadError):
            FrameSequence.from_list([np.zeros((4, 4, 3)), np.zeros((8, 8, 3))])


class TestFrameIO:
    def test_round_trip(self, tmp_path):
        clip = make_clip(4, 16)
        save_frames(clip, tmp_path / "clip")
        loaded = load_frames(tmp_path / "clip")
        assert loaded.frame_count == 4
        # PNG quantizes to 8 bits; half a quantization step of slack.
        assert np.abs(loaded.frames - clip.frames).max() <= 0.5 / 255.0 + 1e-12

    def test_natural_ordering(self, tmp_path):
        from PIL import Image

        d = tmp_path / "frames"
        d.mkdir()
        # frame10 sorts after frame2 under natural ordering, before it lexically
        values = {"frame2.png": 10, "frame10.png": 200}
        for name, v in values.items():
            Image.fromarray(np.full((4, 4, 3), v, dtype=np.uint8)).save(d / name)
        loaded = load_frames(d)
        assert loaded.frames[0, 0, 0, 0] == pytest.approx(10 / 255.0)
        assert loaded.frames[1, 0, 0, 0] == pytest.approx(200 / 255.0)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FrameLoadError):
            load_frames(tmp_path / "nope")

    def test_empty_directory(self, tmp_path):
        d = tmp_path / "empty"
        d.mkdir()
        with pytest.raises(FrameLoadError):
            load_frames(d)

    def test_mixed_resolutions(self, tmp_path):
        from PIL import Image

        d = tmp_path / "frames"
        d.mkdir()
        Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(d / "0.png")
        Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(d / "1.png")
        with pytest.raises(FrameLoadError):
            load_frames(d)


class TestBoundingBox:
    def test_valid(self):
        b = BoundingBox(0.1, 0.2, 0.5, 0.9)
        assert b.as_tuple() == (0.1, 0.2, 0.5, 0.9)

    @pytest.mark.parametrize("coords", [
        (0.5, 0.2, 0.5, 0.9),  # zero width
        (0.6, 0.2, 0.5, 0.9),  # inverted x
        (0.1, 0.9, 0.5, 0.2),  # inverted y
        (-0.1, 0.2, 0.5, 0.9),  # out of range
        (0.1, 0.2, 1.5, 0.9),
    ])
    def test_invalid(self, coords):
        with pytest.raises(ValueError):
            BoundingBox(*coords)

    def test_unchecked_bypasses_validation(self):
        b = BoundingBox.unchecked(0.9, 0.9, 0.1, 0.1)
        assert b.x0 == 0.9 and b.x1 == 0.1


class TestGroundingsDocument:
    DOC = json.dumps({
        "frames": [
            {"index": 0, "entities": [
                {"phrase": "squirrel", "box": [0.1, 0.2, 0.5, 0.9]}]},
            {"index": 1, "entities": [
                {"phrase": "squirrel", "box": [0.15, 0.2, 0.55, 0.9]}]},
        ]
    })

    def test_parse(self):
        g = parse_groundings(self.DOC)
        assert g.frame_count == 2
        assert g.entity_count == 1
        assert g.per_frame[0][0].phrase == "squirrel"
        assert g.per_frame[1][0].box.x0 == pytest.approx(0.15)

    def test_round_trip(self):
        g = parse_groundings(self.DOC)
        again = parse_groundings(serialize_groundings(g))
        assert again == g

    def test_round_trip_random(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            n, m = int(rng.integers(1, 5)), int(rng.integers(0, 4))
            per_frame = []
            for _ in range(n):
                ents = []
                for e in range(m):
                    x0, y0 = rng.uniform(0, 0.4, size=2)
                    x1, y1 = x0 + rng.uniform(0.1, 0.5), y0 + rng.uniform(0.1, 0.5)
                    ents.append(GroundingEntity(
                        f"thing {e}",
                        BoundingBox(round(x0, 6), round(y0, 6), round(x1, 6), round(y1, 6)),
                    ))
                per_frame.append(tuple(ents))
            g = VideoGrounding(per_frame=tuple(per_frame))
            assert parse_groundings(serialize_groundings(g)) == g

    def test_empty_entities_allowed(self):
        g = parse_groundings(json.dumps({"frames": [{"index": 0, "entities": []}]}))
        assert g.entity_count == 0

    @pytest.mark.parametrize("doc", [
        "not json",
        json.dumps({"no_frames": []}),
        json.dumps({"frames": []}),
        json.dumps({"frames": [{"index": 1, "entities": []}]}),  # gap in indices
        json.dumps({"frames": [{"index": 0, "entities": [{"phrase": "x", "box": [0.1, 0.2]}]}]}),
        json.dumps({"frames": [{"index": 0, "entities": [{"phrase": "x", "box": [0.5, 0.2, 0.5, 0.9]}]}]}),
        json.dumps({"frames": [
            {"index": 0, "entities": []},
            {"index": 1, "entities": [{"phrase": "x", "box": [0.1, 0.1, 0.5, 0.5]}]},
        ]}),  # entity counts differ
    ])
    def test_malformed(self, doc):
        with pytest.raises(GroundingFormatError):
            parse_groundings(doc)


class TestEditSpec:
    def test_apply_replaces_phrases_keeps_boxes(self):
        g = uniform_grounding(2, [("a rabbit", (0.1, 0.2, 0.5, 0.9))])
        spec = EditSpec(phrase_map=(("a rabbit", "a kangaroo"),), target_prompt="a kangaroo hops")
        out = apply_edit_spec(g, spec)
        for i in range(2):
            assert out.per_frame[i][0].phrase == "a kangaroo"
            assert out.per_frame[i][0].box == g.per_frame[i][0].box

    def test_unmatched_phrase_warns(self):
        g = uniform_grounding(1, [("a rabbit", (0.1, 0.2, 0.5, 0.9))])
        spec = EditSpec(phrase_map=(("a zebra", "a horse"),), target_prompt="p")
        with pytest.warns(UserWarning):
            out = apply_edit_spec(g, spec)
        assert out == g

    def test_empty_map_is_identity(self):
        g = uniform_grounding(2, [("a rabbit", (0.1, 0.2, 0.5, 0.9))])
        assert apply_edit_spec(g, EditSpec(phrase_map=(), target_prompt="p")) == g

    def test_duplicate_sources_rejected(self):
        with pytest.raises(ValueError):
            EditSpec(phrase_map=(("a", "b"), ("a", "c")), target_prompt="p")

    def test_empty_target_rejected(self):
        with pytest.raises(ValueError):
            EditSpec(phrase_map=(), target_prompt="")


class TestValidation:
    def test_valid_grounding(self):
        clip = make_clip(3, 16)
        g = uniform_grounding(3, [("cat", (0.1, 0.1, 0.6, 0.6))])
        assert validate_grounding(g, clip) == []

    def test_frame_count_mismatch(self):
        clip = make_clip(3, 16)
        g = uniform_grounding(2, [("cat", (0.1, 0.1, 0.6, 0.6))])
        report = validate_grounding(g, clip)
        assert len(report) == 1 and "mismatch" in report[0]

    def test_degenerate_box_reported_not_raised(self):
        clip = make_clip(1, 16)
        bad = VideoGrounding.unchecked(
            [[GroundingEntity("cat", BoundingBox.unchecked(0.9, 0.1, 0.2, 0.6))]]
        )
        report = validate_grounding(bad, clip)
        assert any("box" in r for r in report)
