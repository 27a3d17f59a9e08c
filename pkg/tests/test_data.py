import json

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import cross_val_score

from fndmoe.data import (
    FeatureRecord,
    SyntheticConfig,
    chronological_split,
    generate_synthetic,
    load_features,
    save_dataset,
    save_features,
)
from fndmoe.errors import ConfigError, DataError, InvalidArgumentError

ALL = ("text", "audio_vgg", "audio_w2v", "image", "video")


def probe_accuracy(records, name):
    """Cross-validated logistic-regression accuracy on the flattened tokens of one modality."""
    x = np.stack([r.features[name].ravel() for r in records])
    y = np.array([r.label for r in records])
    return cross_val_score(LogisticRegression(max_iter=2000), x, y, cv=5).mean()


@pytest.fixture(scope="module")
def default_records():
    return generate_synthetic(SyntheticConfig())


class TestSyntheticConfig:
    @pytest.mark.parametrize("kwargs", [
        {"informative": ()},
        {"informative": ("text",), "disruptive": ("text",)},
        {"disruptive": ("nope",)},
        {"disruption_strength": 1.5},
        {"noise_sigma": 0.0},
        {"class_separation": -1.0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            SyntheticConfig(**kwargs)

    def test_header_lists_modalities(self):
        head = SyntheticConfig(n_samples=7).header()
        assert [m["name"] for m in head["modalities"]] == list(ALL)
        assert head["n"] == 7


class TestGenerator:
    def test_deterministic(self):
        cfg = SyntheticConfig(n_samples=50, seed=3)
        assert generate_synthetic(cfg) == generate_synthetic(cfg)

    def test_prefix_stable(self):
        short = generate_synthetic(SyntheticConfig(n_samples=20))
        long = generate_synthetic(SyntheticConfig(n_samples=40))
        assert long[:20] == short

    def test_seed_changes_data(self):
        a = generate_synthetic(SyntheticConfig(n_samples=5, seed=0))
        b = generate_synthetic(SyntheticConfig(n_samples=5, seed=1))
        assert a != b

    def test_shapes_ids_and_timestamps(self, default_records):
        assert len(default_records) == 2000
        r = default_records[17]
        assert r.id == "s000017" and r.ts == 17
        assert all(r.features[m].shape == (4, 16) for m in ALL)

    def test_labels_balanced(self, default_records):
        ones = sum(r.label for r in default_records)
        # Binomial(2000, 0.5): 3 sigma is about 67
        assert abs(ones - 1000) < 67

    def test_disruption_spread_grows_with_strength(self):
        spread = []
        for s in (0.0, 0.5, 1.0):
            recs = generate_synthetic(SyntheticConfig(n_samples=200, disruption_strength=s))
            spread.append(np.std([r.features["video"] for r in recs]))
        assert spread[0] < spread[1] < spread[2]

    def test_every_modality_is_informative_without_disruption(self):
        recs = generate_synthetic(SyntheticConfig(informative=ALL, disruptive=(), disruption_strength=0.0))
        for name in ALL:
            assert probe_accuracy(recs, name) > 0.8, name

    @pytest.mark.parametrize("strength", [0.0, 0.8, 1.0])
    def test_disruptive_modality_carries_no_label_signal(self, strength):
        recs = generate_synthetic(SyntheticConfig(disruption_strength=strength))
        assert 0.45 <= probe_accuracy(recs, "video") <= 0.55

    def test_probe_gap(self, default_records):
        informative = min(probe_accuracy(default_records, m) for m in ALL[:4])
        assert informative - probe_accuracy(default_records, "video") > 0.2


class TestIO:
    def test_round_trip(self, tmp_path):
        cfg = SyntheticConfig(n_samples=30)
        recs = generate_synthetic(cfg)
        save_dataset(recs, tmp_path, cfg.header())
        assert load_features(tmp_path) == recs
        assert load_features(tmp_path / "features.jsonl") == recs
        assert json.loads((tmp_path / "dataset.json").read_text())["n"] == 30

    def test_empty_file(self, tmp_path):
        path = tmp_path / "features.jsonl"
        path.write_text("")
        assert load_features(path) == []

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(DataError, match="missing.jsonl"):
            load_features(tmp_path / "missing.jsonl")

    def _write(self, tmp_path, objs):
        path = tmp_path / "f.jsonl"
        path.write_text("".join(json.dumps(o) + "\n" for o in objs))
        return path

    def _obj(self, **over):
        obj = {"id": "a", "ts": 0, "label": 1, "features": {"text": [[0.0, 1.0]]}}
        obj.update(over)
        return obj

    def test_bad_label_reports_line(self, tmp_path):
        path = self._write(tmp_path, [self._obj(), self._obj(id="b", label=2)])
        with pytest.raises(DataError, match=r"f\.jsonl:2: label"):
            load_features(path)

    def test_boolean_label_rejected(self, tmp_path):
        with pytest.raises(DataError, match="label"):
            load_features(self._write(tmp_path, [self._obj(label=True)]))

    def test_missing_field(self, tmp_path):
        obj = self._obj()
        del obj["ts"]
        with pytest.raises(DataError, match=r":1: missing field 'ts'"):
            load_features(self._write(tmp_path, [obj]))

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "f.jsonl"
        path.write_text(json.dumps(self._obj()) + "\n{not json\n")
        with pytest.raises(DataError, match=":2: malformed"):
            load_features(path)

    def test_shape_mismatch_between_records(self, tmp_path):
        path = self._write(tmp_path, [self._obj(), self._obj(id="b", features={"text": [[0.0, 1.0, 2.0]]})])
        with pytest.raises(DataError, match=":2: modality 'text'"):
            load_features(path)

    def test_header_shapes_enforced(self, tmp_path):
        path = self._write(tmp_path, [self._obj()])
        header = {"modalities": [{"name": "text", "dim": 3, "tokens": 1}]}
        with pytest.raises(DataError, match="expected"):
            load_features(path, header)

    def test_ragged_matrix(self, tmp_path):
        with pytest.raises(DataError):
            load_features(self._write(tmp_path, [self._obj(features={"text": [[0.0], [1.0, 2.0]]})]))

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "f.jsonl"
        path.write_text("\n" + json.dumps(self._obj()) + "\n\n")
        assert len(load_features(path)) == 1

    def test_save_uses_lf(self, tmp_path):
        save_features(generate_synthetic(SyntheticConfig(n_samples=3)), tmp_path / "x.jsonl")
        data = (tmp_path / "x.jsonl").read_bytes()
        assert b"\r" not in data and data.count(b"\n") == 3


def dummy(n, ts=None):
    return [FeatureRecord(f"r{i:04d}", i if ts is None else ts[i], 0, {}) for i in range(n)]


class TestSplit:
    @pytest.mark.parametrize("n, sizes", [(10, (7, 1, 2)), (100, (70, 15, 15)), (1234, (863, 185, 186)), (2000, (1400, 300, 300))])
    def test_floor_rule(self, n, sizes):
        tr, va, te = chronological_split(dummy(n))
        assert (len(tr), len(va), len(te)) == sizes

    def test_chronological(self):
        tr, va, te = chronological_split(dummy(20))
        assert max(r.ts for r in tr) < min(r.ts for r in va) <= max(r.ts for r in va) < min(r.ts for r in te)

    def test_input_order_does_not_matter(self):
        recs = dummy(50)
        shuffled = [recs[i] for i in np.random.default_rng(0).permutation(50)]
        assert chronological_split(shuffled) == chronological_split(recs)

    def test_equal_timestamps_break_ties_by_id(self):
        recs = dummy(10, ts=[0] * 10)[::-1]
        tr, _, _ = chronological_split(recs)
        assert [r.id for r in tr] == [f"r{i:04d}" for i in range(7)]

    def test_too_small(self):
        with pytest.raises(InvalidArgumentError):
            chronological_split(dummy(2))
