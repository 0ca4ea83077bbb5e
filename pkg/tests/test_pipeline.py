"""
Tests for experiment configuration, datasets, the run journal and reports
"""

import gzip
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from backend.diversity_metrics import MetricRow
from backend.pipeline.config import (ConfigError, config_from_dict, load_config, parse_channels,
                                     save_config)
from backend.pipeline.dataset import (DatasetConfig, DatasetError, gen_dataset, read_idx,
                                      write_idx)
from backend.pipeline.report import (DiversityReport, load_report, report_render, rows_from_csv,
                                     rows_to_csv, write_rows)
from backend.pipeline.run_journal import JournalEventType, RunJournal

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


class TestConfig:
    """Test YAML configuration loading and validation"""

    def test_defaults(self):
        """An empty mapping gives the documented defaults"""
        config = config_from_dict({})
        assert config.architecture == "desk"
        assert config.color_matrix == "dataset"
        assert config.parent.epochs == 20

    def test_seed_offsets(self):
        """Blocks derive their seeds from the top-level seed"""
        config = config_from_dict({"seed": 10})
        assert config.seeds() == {"experiment": 10, "dataset": 10, "parent": 10, "snapshot": 11,
                                  "prune_tune": 12, "viz": 13, "saliency": 14}

    def test_explicit_block_seed_wins(self):
        """A block's own seed overrides the derived one"""
        config = config_from_dict({"seed": 10, "snapshot": {"seed": 99}})
        assert config.snapshot.seed == 99
        assert config.prune_tune.seed == 12

    def test_unknown_key_is_named(self):
        """Typos raise with the dotted key"""
        with pytest.raises(ConfigError, match="parent.lrr"):
            config_from_dict({"parent": {"lrr": 0.1}})

    @pytest.mark.parametrize("data", [
        {"parent": {"epochs": "ten"}},
        {"parent": {"epochs": True}},
        {"parent": {"augment": "yes"}},
        {"seed": 1.5},
        {"viz": [1, 2]},
    ])
    def test_type_errors(self, data):
        """Values of the wrong type are rejected"""
        with pytest.raises(ConfigError):
            config_from_dict(data)

    def test_validation_names_block(self):
        """Block validation failures name the block"""
        with pytest.raises(ConfigError, match="^parent:"):
            config_from_dict({"parent": {"momentum": 1.5}})

    def test_architecture(self):
        """The top-level architecture drives the parent and must be a preset"""
        assert config_from_dict({"architecture": "tiny"}).parent.architecture == "tiny"
        with pytest.raises(ConfigError):
            config_from_dict({"architecture": "resnet"})

    def test_color_matrix_forms(self):
        """Named choices and explicit square matrices are accepted"""
        assert config_from_dict({"color_matrix": "identity"}).color_matrix == "identity"
        matrix = [[1, 0, 0], [0, 2, 0], [0, 0, 1]]
        assert config_from_dict({"color_matrix": matrix}).color_matrix == \
            [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]
        with pytest.raises(ConfigError):
            config_from_dict({"color_matrix": "purple"})
        with pytest.raises(ConfigError):
            config_from_dict({"color_matrix": [[1, 1], [1, 1]]})

    def test_negative_workers(self):
        """workers must be nonnegative"""
        with pytest.raises(ConfigError):
            config_from_dict({"workers": -1})

    def test_resolved_workers_env(self, monkeypatch):
        """EDIV_WORKERS overrides the configured count"""
        monkeypatch.setenv("EDIV_WORKERS", "3")
        assert config_from_dict({"workers": 1}).resolved_workers() == 3

    def test_save_load_digest(self, tmp_path):
        """A saved config reloads with the same digest"""
        config = config_from_dict({"seed": 3, "architecture": "tiny"})
        path = save_config(config, tmp_path / "out" / "config.yaml")
        assert load_config(path).digest() == config.digest()

    def test_digest_tracks_values(self):
        """Changing any value changes the digest"""
        assert config_from_dict({"seed": 1}).digest() != config_from_dict({"seed": 2}).digest()

    def test_file_errors(self, tmp_path):
        """Missing files, bad YAML and non-mapping documents raise ConfigError"""
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.yaml")
        bad = tmp_path / "bad.yaml"
        bad.write_text("seed: [1, 2\n")
        with pytest.raises(ConfigError):
            load_config(bad)
        listing = tmp_path / "list.yaml"
        listing.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            load_config(listing)

    def test_idx_paths_resolve_relative_to_config(self, tmp_path):
        """IDX paths are resolved against the config directory"""
        write_idx(np.zeros((4, 8, 8), dtype=np.uint8), tmp_path / "images.idx")
        write_idx(np.zeros(4, dtype=np.uint8), tmp_path / "labels.idx")
        path = tmp_path / "exp.yaml"
        path.write_text(yaml.safe_dump({"dataset": {"kind": "idx", "train_images": "images.idx",
                                                    "train_labels": "labels.idx"}}))
        config = load_config(path)
        assert Path(config.dataset.train_images) == tmp_path / "images.idx"

    def test_idx_missing_file(self, tmp_path):
        """A missing IDX file is a configuration error"""
        with pytest.raises(ConfigError, match="train_images"):
            config_from_dict({"dataset": {"kind": "idx", "train_images": "nope.idx",
                                          "train_labels": "nope.idx"}}, base_dir=tmp_path)

    @pytest.mark.parametrize("name", ["smoke.yaml", "desk.yaml"])
    def test_shipped_configs_load(self, name):
        """The bundled configurations are valid"""
        config = load_config(CONFIGS / name)
        assert config.architecture in ("tiny", "desk")

    def test_parse_channels(self):
        """Channel lists accept single indices and ranges"""
        assert parse_channels("0, 2,5-7") == [0, 2, 5, 6, 7]
        with pytest.raises(ValueError):
            parse_channels("")
        with pytest.raises(ConfigError):
            config_from_dict({"viz": {"channels": "a-b"}})


class TestDataset:
    """Test synthetic and IDX datasets"""

    def test_synthetic_shape_and_balance(self):
        """Ten balanced classes of (3, size, size) images in [0, 1]"""
        data = gen_dataset(DatasetConfig(image_size=8, train_per_class=3, val_per_class=2))
        assert data.x_train.shape == (30, 3, 8, 8)
        assert data.x_val.shape == (20, 3, 8, 8)
        assert data.num_classes == 10
        np.testing.assert_array_equal(data.class_counts("train"), np.full(10, 3))
        assert data.x_train.min() >= 0.0 and data.x_train.max() <= 1.0

    def test_deterministic(self):
        """The same seed gives the same digest; another seed does not"""
        config = DatasetConfig(image_size=8, train_per_class=1, val_per_class=1, seed=5)
        assert gen_dataset(config).digest() == gen_dataset(config).digest()
        other = DatasetConfig(image_size=8, train_per_class=1, val_per_class=1, seed=6)
        assert gen_dataset(config).digest() != gen_dataset(other).digest()

    @pytest.mark.parametrize("config", [
        DatasetConfig(kind="imagenet"),
        DatasetConfig(image_size=4),
        DatasetConfig(train_per_class=0),
        DatasetConfig(kind="idx"),
    ])
    def test_invalid(self, config):
        """Bad parameters raise DatasetError"""
        with pytest.raises(DatasetError):
            gen_dataset(config)

    def test_idx_roundtrip(self, tmp_path):
        """write_idx output is read back, gzip included"""
        array = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
        path = write_idx(array, tmp_path / "a.idx")
        np.testing.assert_array_equal(read_idx(path), array)
        packed = tmp_path / "a.idx.gz"
        packed.write_bytes(gzip.compress(path.read_bytes()))
        np.testing.assert_array_equal(read_idx(packed), array)

    def test_idx_errors(self, tmp_path):
        """Bad magic and truncated bodies raise DatasetError"""
        bad = tmp_path / "bad.idx"
        bad.write_bytes(b"\x01\x00\x08\x01\x00\x00\x00\x02ab")
        with pytest.raises(DatasetError, match="magic"):
            read_idx(bad)
        short = tmp_path / "short.idx"
        short.write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x05ab")
        with pytest.raises(DatasetError):
            read_idx(short)

    def test_idx_dataset_split(self, tmp_path):
        """Without validation files a seeded fraction is held out"""
        images = np.random.default_rng(0).integers(0, 256, size=(10, 8, 8)).astype(np.uint8)
        write_idx(images, tmp_path / "x.idx")
        write_idx(np.arange(10, dtype=np.uint8) % 2, tmp_path / "y.idx")
        data = gen_dataset(DatasetConfig(kind="idx", train_images=str(tmp_path / "x.idx"),
                                         train_labels=str(tmp_path / "y.idx"), val_fraction=0.2))
        assert data.x_train.shape == (8, 1, 8, 8)
        assert data.x_val.shape == (2, 1, 8, 8)
        assert data.x_train.max() <= 1.0
        assert data.source == "idx"


class TestRunJournal:
    """Test the append-only run journal"""

    def test_events_and_integrity(self, tmp_path):
        """Logged events read back in order and verify"""
        journal = RunJournal(tmp_path)
        journal.log_event(JournalEventType.CONFIG_LOADED, details={"digest": "abc"})
        journal.stage_start("parent")
        journal.artifact("parent", tmp_path / "parent.ediv")
        journal.stage_end("parent", accuracy=0.5)
        events = journal.events()
        assert [e.event_type for e in events] == [
            JournalEventType.CONFIG_LOADED, JournalEventType.STAGE_START,
            JournalEventType.ARTIFACT_WRITTEN, JournalEventType.STAGE_END]
        assert len(journal.events(JournalEventType.STAGE_END)) == 1
        assert journal.verify_integrity()["integrity_status"] == "good"
        assert journal.stage_durations()["parent"] >= 0.0

    def test_tampering_detected(self, tmp_path):
        """An edited event no longer matches its checksum"""
        journal = RunJournal(tmp_path)
        journal.stage_failed("hashing", "boom")
        record = json.loads(journal.path.read_text())
        record["details"]["error"] = "fine"
        journal.path.write_text(json.dumps(record) + "\n")
        result = journal.verify_integrity()
        assert result["invalid_entries"] == 1
        assert result["integrity_status"] == "compromised"

    def test_garbage_lines_skipped(self, tmp_path):
        """Unparseable lines are ignored when reading"""
        journal = RunJournal(tmp_path)
        journal.stage_start("dataset")
        with open(journal.path, "a") as f:
            f.write("{not json\n")
        assert len(journal.events()) == 1
        assert journal.verify_integrity()["invalid_entries"] == 1


class TestReport:
    """Test report serialisation and rendering"""

    ROWS = [
        MetricRow("snapshot", "d_kl", 0.25, 0.01, 2),
        MetricRow("snapshot", "viz_phash", 20.5, 1.5, 32),
        MetricRow("prune_tune", "viz_phash", 24.0, 1.0, 32),
    ]

    def test_lookup(self):
        """Rows are found by method and metric; methods keep first-seen order"""
        report = DiversityReport(rows=list(self.ROWS))
        assert report.methods() == ["snapshot", "prune_tune"]
        assert report.value("prune_tune", "viz_phash").mean == 24.0
        with pytest.raises(KeyError):
            report.value("prune_tune", "d_kl")

    def test_csv(self):
        """CSV rows parse back to the same values"""
        text = rows_to_csv(self.ROWS)
        assert text.splitlines()[0] == "method,metric,mean,stderr,n"
        assert rows_from_csv(text) == self.ROWS

    def test_render_and_load(self, tmp_path):
        """report_render writes JSON, CSV and a figure that load back"""
        report = DiversityReport(rows=list(self.ROWS), layer=6, channels=32,
                                 provenance={"config_digest": "x"})
        written = report_render(report, tmp_path)
        assert set(written) == {"json", "csv", "figure"}
        assert written["figure"].read_bytes()[:4] == b"\x89PNG"
        loaded = load_report(tmp_path)
        assert loaded.rows == self.ROWS
        assert loaded.layer == 6 and loaded.provenance == {"config_digest": "x"}

    def test_no_figure_without_hash_rows(self, tmp_path):
        """Only Hamming distance rows are plotted"""
        written = report_render(DiversityReport(rows=self.ROWS[:1]), tmp_path)
        assert "figure" not in written
        assert not report_render(DiversityReport(rows=list(self.ROWS)), tmp_path / "b",
                                 figure=False).get("figure")

    def test_write_rows(self, tmp_path):
        """Rows are written as JSON or CSV by suffix"""
        json_path = write_rows(self.ROWS, tmp_path / "rows.json")
        assert json.loads(json_path.read_text())[0]["metric"] == "d_kl"
        csv_path = write_rows(self.ROWS, tmp_path / "rows.csv")
        assert rows_from_csv(csv_path.read_text()) == self.ROWS
