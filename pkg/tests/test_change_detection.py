import math

import numpy as np
import pytest
from conftest import T0, make_gateway, make_sequence, plant
from PIL import Image

from vistrends.baselines import (
    ImageDecodeError,
    color_hist_pair_score,
    hog_descriptor,
    hog_pair_score,
    make_pair_scorer,
)
from vistrends.change_detection import (
    CHECKPOINT_NAME,
    ChangeRecord,
    change_id,
    pairs_with_changes,
    read_changes,
    run_stage1,
    write_changes,
)
from vistrends.gateway import PlantedChange


def small_world(oracle):
    seqs = [make_sequence(f"L{j}", 10, lat=40 + j * 0.01) for j in range(3)]
    planted = [
        plant(oracle, seqs[0], 2, "no awning", "a red awning"),
        plant(oracle, seqs[0], 7, "grey door", "blue door"),
        plant(oracle, seqs[1], 1, "empty lot", "a new building"),
        plant(oracle, seqs[1], 9, "bakery", "pharmacy"),
        plant(oracle, seqs[2], 5, "old sign", "new sign"),
    ]
    return seqs, planted


def test_planted_changes_are_recovered(oracle):
    seqs, planted = small_world(oracle)
    changes, report = run_stage1(seqs, make_gateway(oracle))
    assert len(changes) == 5 and report.raw_changes == 5
    got = {(c.location_id, c.after_index, c.before_desc, c.after_desc) for c in changes}
    assert ("L0", 2, "no awning", "a red awning") in got
    assert ("L1", 9, "bakery", "pharmacy") in got
    assert all(c.critic_passed for c in changes)


def test_critic_drops_hallucinations(oracle):
    seqs, _ = small_world(oracle)
    plant(oracle, seqs[0], 4, "a tree", "no tree", hallucination=True)
    plant(oracle, seqs[2], 8, "a car", "a truck", hallucination=True)
    on, rep_on = run_stage1(seqs, make_gateway(oracle), critic_enabled=True)
    off, _ = run_stage1(seqs, make_gateway(oracle), critic_enabled=False)
    assert len(on) == 5 and rep_on.critic_rejected == 2
    assert len(off) == 7
    assert {c.id for c in on} <= {c.id for c in off}
    assert not any(c.critic_passed for c in off)


def test_empty_input_gives_empty_store(oracle):
    changes, report = run_stage1([], make_gateway(oracle))
    assert changes == [] and report.sequences == 0


def test_records_are_grounded_in_their_images(oracle):
    seqs, _ = small_world(oracle)
    by_loc = {s.location_id: s for s in seqs}
    for c in run_stage1(seqs, make_gateway(oracle))[0]:
        seq = by_loc[c.location_id]
        a, b = seq.images[c.after_index - 1], seq.images[c.after_index]
        assert (c.before_time, c.after_time) == (a.timestamp, b.timestamp)
        assert (c.before_image, c.after_image) == (a.image_uri, b.image_uri)
        assert c.before_time < c.after_time
        assert c.id == change_id(c.location_id, c.after_index, c.before_desc, c.after_desc)


def test_duplicate_lines_collapse(oracle):
    seq = make_sequence("L0")
    plant(oracle, seq, 3, "x", "y")
    plant(oracle, seq, 3, "x ", "Y")  # same change after whitespace and case folding
    changes, report = run_stage1([seq], make_gateway(oracle), critic_enabled=False)
    assert len(changes) == 1 and report.duplicates == 1


def test_interrupted_run_resumes_to_same_store(oracle, tmp_path):
    seqs, _ = small_world(oracle)
    full, _ = run_stage1(seqs, make_gateway(oracle))
    work = tmp_path / "stage1"
    first, _ = run_stage1(seqs, make_gateway(oracle), work_dir=work, batch_size=1, stop_after=2)
    assert len(first) < len(full)
    assert (work / CHECKPOINT_NAME).read_text().split() == ["L0", "L1"]
    calls_before = oracle.calls["detect_changes"]
    resumed, report = run_stage1(seqs, make_gateway(oracle), work_dir=work, batch_size=1)
    assert resumed == full
    assert report.skipped_checkpointed == 2
    assert oracle.calls["detect_changes"] - calls_before == 1


def test_poisoned_sequence_is_not_checkpointed(oracle, tmp_path):
    seqs, _ = small_world(oracle)
    oracle.fail_images.add(seqs[1].images[0].image_uri)
    changes, report = run_stage1(seqs, make_gateway(oracle), work_dir=tmp_path)
    assert report.poisoned == ["L1"]
    assert {c.location_id for c in changes} == {"L0", "L2"}
    assert "L1" not in (tmp_path / CHECKPOINT_NAME).read_text().split()
    oracle.fail_images.clear()
    again, _ = run_stage1(seqs, make_gateway(oracle), work_dir=tmp_path)
    assert {c.location_id for c in again} == {"L0", "L1", "L2"}


def test_critic_is_monotone(oracle):
    seq = make_sequence("L0", 12)
    for i, hall in enumerate([False, True, False, True, True, False], start=1):
        plant(oracle, seq, i, f"b{i}", f"a{i}", hallucination=hall)
    on = {c.id for c in run_stage1([seq], make_gateway(oracle))[0]}
    off = {c.id for c in run_stage1([seq], make_gateway(oracle), critic_enabled=False)[0]}
    assert on <= off and len(on) == 3 and len(off) == 6


def test_change_store_round_trip(oracle, tmp_path):
    seqs, _ = small_world(oracle)
    changes, _ = run_stage1(seqs, make_gateway(oracle))
    write_changes(tmp_path / "c.jsonl", reversed(changes))
    assert read_changes(tmp_path / "c.jsonl") == changes


def test_pairs_with_changes(oracle):
    seq = make_sequence("L0")
    plant(oracle, seq, 3, "x", "y")
    plant(oracle, seq, 3, "p", "q")
    plant(oracle, seq, 5, "m", "n")
    changes, _ = run_stage1([seq], make_gateway(oracle))
    assert pairs_with_changes(changes) == {("L0", 3), ("L0", 5)}
    assert pairs_with_changes([]) == set()


def test_change_text_joins_descriptions():
    rec = ChangeRecord("i", "L", "before", "after", 1, T0, T0, True, 0.0, 0.0)
    assert rec.text == "before → after"


# classical baselines


def reference_hog(img: np.ndarray) -> np.ndarray:
    """Pixel-by-pixel HoG with explicit loops: 8px cells, 9 bins over [0, 180),
    2x2 blocks at one-cell stride, L2 normalization with eps 1e-5."""
    h, w = img.shape
    cells = np.zeros((h // 8, w // 8, 9))
    for y in range(h):
        for x in range(w):
            gx = img[y, x + 1] - img[y, x - 1] if 0 < x < w - 1 else 0.0
            gy = img[y + 1, x] - img[y - 1, x] if 0 < y < h - 1 else 0.0
            mag = math.hypot(gx, gy)
            ang = math.degrees(math.atan2(gy, gx)) % 180.0
            cells[y // 8, x // 8, min(int(ang // 20), 8)] += mag
    out = []
    for by in range(cells.shape[0] - 1):
        for bx in range(cells.shape[1] - 1):
            v = cells[by : by + 2, bx : bx + 2].ravel()
            out.append(v / math.sqrt(float(v @ v) + 1e-10))
    return np.concatenate(out)


def test_hog_matches_loop_reference():
    rng = np.random.default_rng(0)
    for shape in [(16, 16), (24, 32)]:
        img = rng.integers(0, 256, shape).astype(float)
        np.testing.assert_allclose(hog_descriptor(img), reference_hog(img), atol=1e-12)
    assert hog_descriptor(np.zeros((16, 16))).shape == (36,)


def test_hog_scores():
    rng = np.random.default_rng(1)
    noise = rng.integers(0, 256, (64, 64, 3)).astype(np.uint8)
    gray = np.full((64, 64, 3), 128, np.uint8)
    assert hog_pair_score(noise, noise) == pytest.approx(0.0, abs=1e-12)
    assert hog_pair_score(noise, gray) > 0


def test_color_histogram_distances():
    red = np.zeros((8, 8, 3), np.uint8)
    red[..., 0] = 255
    blue = np.zeros((8, 8, 3), np.uint8)
    blue[..., 2] = 255
    half = red.copy()
    half[4:] = blue[4:]
    assert color_hist_pair_score(red, blue) == pytest.approx(2.0)
    assert color_hist_pair_score(half, red) == pytest.approx(1.0)
    assert color_hist_pair_score(red, red) == 0.0


def test_scorers_accept_file_uris_and_are_symmetric(tmp_path):
    rng = np.random.default_rng(2)
    paths = []
    for i in range(2):
        p = tmp_path / f"im{i}.png"
        Image.fromarray(rng.integers(0, 256, (40, 40, 3)).astype(np.uint8)).save(p)
        paths.append(p.as_uri())
    for name in ("hog", "color_hist"):
        f = make_pair_scorer(name)
        assert f(paths[0], paths[1]) == pytest.approx(f(paths[1], paths[0]))
        assert f(paths[0], paths[0]) == pytest.approx(0.0, abs=1e-12)


def test_undecodable_image_names_the_uri(tmp_path):
    bad = tmp_path / "broken.jpg"
    bad.write_bytes(b"not an image")
    with pytest.raises(ImageDecodeError, match="broken.jpg"):
        hog_pair_score(bad.as_uri(), bad.as_uri())
    with pytest.raises(ImageDecodeError, match="synth://x"):
        color_hist_pair_score("synth://x", "synth://x")


def test_embedding_and_caption_scorers(oracle):
    gw = make_gateway(oracle)
    emb = make_pair_scorer("embedding", gw)
    assert emb("a", "a") == pytest.approx(0.0, abs=1e-12)
    assert emb("a", "b") == pytest.approx(emb("b", "a"))
    oracle.captions.update({"a": "a quiet street", "b": "a quiet street", "c": "a busy market"})
    cap = make_pair_scorer("caption", gw)
    assert cap("a", "b") == pytest.approx(0.0, abs=1e-12)
    assert cap("a", "c") > 0
    with pytest.raises(ValueError):
        make_pair_scorer("caption")
    with pytest.raises(ValueError):
        make_pair_scorer("sift")


def test_critic_override_lets_a_ghost_leak(oracle):
    seq = make_sequence("L0")
    a, b = seq.images[0].image_uri, seq.images[1].image_uri
    oracle.plant_change(PlantedChange(a, b, "x", "y", hallucination=True, critic_keep=True))
    assert len(run_stage1([seq], make_gateway(oracle))[0]) == 1
