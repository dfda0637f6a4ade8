import copy
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nofrills.dataio import (CheckpointError, DataError, FormatError, PoseSkeleton, dataset_equal,
                             decode_tensor, encode_tensor, load_checkpoint, load_dataset, load_records,
                             read_features, record_from_dict, record_to_dict, save_checkpoint, save_dataset,
                             write_features)
from nofrills.factormodel import FactorModel, ModelConfig, load_model, save_model
from nofrills.taxonomy import Taxonomy


def valid_record():
    kp = [[10.0 + k, 20.0 + k, 0.5] for k in range(18)]
    return {
        "image_id": "img7",
        "width": 100,
        "height": 80,
        "detections": [
            {"box": [1, 2, 30, 40], "object": 0, "score": 0.9, "feature_row": 0},
            {"box": [20, 10, 60, 70], "object": 1, "score": 0.4, "feature_row": 1},
        ],
        "poses": [{"box": [1, 2, 30, 40], "keypoints": kp}],
        "gt_pairs": [{"human_box": [1, 2, 30, 40], "object_box": [20, 10, 60, 70], "hoi": 1}],
    }


TAX = Taxonomy(("person", "cup"), ("hold", "look"), ((1, 0), (1, 1)), (5, 20))


def test_tensor_round_trip_bit_exact():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((7, 5)).astype(np.float32)
    a[0, 0] = np.float32(1e-38)
    b = decode_tensor(encode_tensor(a))
    assert b.dtype == np.float32 and b.tobytes() == a.tobytes()
    assert decode_tensor(encode_tensor(np.zeros((0, 3)))).shape == (0, 3)


def test_tensor_layout():
    blob = encode_tensor(np.array([[1.0, -2.0]], dtype=np.float32))
    assert blob[:5] == b"NFHF1"
    assert blob[5:13] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(blob[13:21], "<f4").tolist() == [1.0, -2.0]
    assert len(blob) == 5 + 8 + 8 + 4


def test_single_flipped_byte_detected():
    rng = np.random.default_rng(1)
    blob = bytearray(encode_tensor(rng.standard_normal((4, 16)).astype(np.float32)))
    for pos in range(13, len(blob) - 4):
        bad = bytearray(blob)
        bad[pos] ^= 0x01 << (pos % 8)
        with pytest.raises(FormatError, match="CRC32"):
            decode_tensor(bytes(bad))


def test_truncated_and_wrong_magic():
    blob = encode_tensor(np.ones((2, 2)))
    with pytest.raises(FormatError):
        decode_tensor(blob[:-1])
    with pytest.raises(FormatError):
        decode_tensor(b"XXXXX" + blob[5:])


def test_write_features_rejects_nan(tmp_path):
    with pytest.raises(DataError):
        write_features(tmp_path / "f.nfhf", np.array([[np.nan]]))


def test_record_parse_ok():
    r = record_from_dict(valid_record(), TAX, 2)
    assert r.image_id == "img7" and len(r.detections) == 2 and r.gt_pairs[0].hoi == 1
    assert record_from_dict(record_to_dict(r), TAX, 2) == r


def test_empty_records_file(tmp_path):
    p = tmp_path / "r.jsonl"
    p.write_text("")
    assert load_records(p, TAX) == []


def test_dangling_feature_row_names_row():
    d = valid_record()
    d["detections"][1]["feature_row"] = 2
    with pytest.raises(DataError, match=r"img7.*feature_row.*row 2"):
        record_from_dict(d, TAX, 2)


def test_duplicate_ids_rejected(tmp_path):
    line = json.dumps(valid_record())
    p = tmp_path / "r.jsonl"
    p.write_text(line + "\n" + line + "\n")
    with pytest.raises(DataError, match="duplicate"):
        load_records(p, TAX, 2)


def _set(path, value):
    def f(d):
        cur = d
        for k in path[:-1]:
            cur = cur[k]
        cur[path[-1]] = value
    return f


def _drop(path):
    def f(d):
        cur = d
        for k in path[:-1]:
            cur = cur[k]
        del cur[path[-1]]
    return f


# each mutation breaks exactly one invariant; the second item is the field
# the diagnostic must mention
MUTATIONS = [
    (_set(["width"], 0), "width"),
    (_set(["height"], "tall"), "height"),
    (_drop(["detections"]), "detections"),
    (_set(["extra"], 1), "extra"),
    (_set(["detections", 0, "box"], [1, 2, 300, 40]), "detections[0].box"),
    (_set(["detections", 0, "box"], [5, 2, 5, 40]), "detections[0].box"),
    (_set(["detections", 1, "box"], [1, 2, 3]), "detections[1].box"),
    (_set(["detections", 0, "object"], 2), "detections[0].object"),
    (_set(["detections", 0, "object"], 0.5), "detections[0].object"),
    (_set(["detections", 1, "score"], 1.5), "detections[1].score"),
    (_set(["detections", 1, "score"], float("nan")), "detections[1].score"),
    (_set(["detections", 0, "feature_row"], -1), "detections[0].feature_row"),
    (_set(["detections", 0, "feature_row"], 99), "detections[0].feature_row"),
    (_drop(["detections", 0, "score"]), "detections[0]"),
    (_set(["poses", 0, "keypoints"], [[0, 0, 1]] * 17), "poses[0].keypoints"),
    (_set(["poses", 0, "keypoints", 3], [0, 0, 1.2]), "poses[0].keypoints"),
    (_set(["gt_pairs", 0, "hoi"], 2), "gt_pairs[0].hoi"),
    (_set(["gt_pairs", 0, "human_box"], [-1, 2, 30, 40]), "gt_pairs[0].human_box"),
    (_set(["gt_pairs", 0, "object_box"], [20, 10, 60, 81]), "gt_pairs[0].object_box"),
    (_set(["gt_pairs"], {}), "gt_pairs"),
]


@settings(max_examples=150, deadline=None)
@given(st.lists(st.integers(0, len(MUTATIONS) - 1), min_size=1, max_size=3, unique=True))
def test_fuzzed_invalid_records_rejected(which):
    d = valid_record()
    applied = []
    for k in which:
        try:
            MUTATIONS[k][0](d)
        except (KeyError, IndexError, TypeError):
            continue  # an earlier mutation removed the target
        applied.append(k)
    with pytest.raises(DataError) as exc:
        record_from_dict(d, TAX, 2)
    msg = str(exc.value)
    assert "img7" in msg
    assert any(MUTATIONS[k][1] in msg for k in applied)


def test_missing_image_id():
    d = valid_record()
    del d["image_id"]
    with pytest.raises(DataError, match="image_id"):
        record_from_dict(d, TAX, 2)


def test_synthetic_dataset_round_trip(tmp_path, small_synth):
    out, tax = small_synth
    ds = out.dataset(tax)
    sub = ds.subset(range(10))
    save_dataset(sub, tmp_path / "r.jsonl", tmp_path / "f.nfhf")
    back = load_dataset(tmp_path / "r.jsonl", tmp_path / "f.nfhf", tax)
    assert dataset_equal(back.records, sub.records)
    assert back.features.tobytes() == sub.features.tobytes()
    # second save is byte-identical
    save_dataset(back, tmp_path / "r2.jsonl", tmp_path / "f2.nfhf")
    assert (tmp_path / "r.jsonl").read_bytes() == (tmp_path / "r2.jsonl").read_bytes()
    assert (tmp_path / "f.nfhf").read_bytes() == (tmp_path / "f2.nfhf").read_bytes()


def test_checkpoint_round_trip_bit_exact(tmp_path, syn_tax):
    m = FactorModel(syn_tax, ModelConfig(factors=("human_app", "boxes", "pose"), app_dim=16, seed=4))
    # perturb buffers so they are not at their init values
    for mlp in m.mlps.values():
        mlp.buffers.flat[...] = np.random.default_rng(0).standard_normal(mlp.buffers.flat.size)
    save_model(m, tmp_path / "ck")
    m2, manifest = load_model(tmp_path / "ck")
    assert manifest["taxonomy_hash"] == syn_tax.content_hash()
    s1, s2 = m.state_dict(), m2.state_dict()
    assert list(s1) == list(s2)
    for k in s1:
        assert s1[k].tobytes() == s2[k].tobytes(), k


def test_checkpoint_empty_params(tmp_path):
    save_checkpoint({}, tmp_path / "ck")
    params, manifest = load_checkpoint(tmp_path / "ck")
    assert params == {} and manifest["total"] == 0


def test_checkpoint_wrong_interaction_count(tmp_path, syn_tax):
    m = FactorModel(syn_tax, ModelConfig(factors=("boxes",), app_dim=8))
    save_model(m, tmp_path / "ck")
    fewer = Taxonomy(syn_tax.objects, syn_tax.interactions[:5],
                     tuple(c for c in syn_tax.hoi_classes if c[1] < 5),
                     tuple(0 for c in syn_tax.hoi_classes if c[1] < 5))
    with pytest.raises(CheckpointError, match="shape"):
        load_model(tmp_path / "ck", fewer)


def test_checkpoint_version_and_corruption(tmp_path):
    save_checkpoint({"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, tmp_path / "ck")
    man = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    man["version"] = 99
    (tmp_path / "ck" / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ck")
    save_checkpoint({"w": np.arange(6, dtype=np.float32)}, tmp_path / "ck2")
    blob = bytearray((tmp_path / "ck2" / "params.nfhf").read_bytes())
    blob[15] ^= 0xFF
    (tmp_path / "ck2" / "params.nfhf").write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "ck2")


def test_pose_skeleton_validation():
    with pytest.raises(ValueError):
        PoseSkeleton(np.zeros((17, 3)))
    kp = np.zeros((18, 3))
    kp[0, 2] = -0.1
    with pytest.raises(ValueError):
        PoseSkeleton(kp)
    kp[0, 2] = 0.0
    s = PoseSkeleton(kp)
    assert s.tight_box() is None
    with pytest.raises(ValueError):
        s.keypoints[0, 0] = 1.0
