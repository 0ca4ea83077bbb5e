"""
Experiment pipeline: configuration, datasets, run journal, report.
The runner is imported from backend.pipeline.runner.
"""

from .config import ConfigError, ExperimentConfig, config_from_dict, load_config, save_config
from .dataset import Dataset, DatasetConfig, DatasetError, gen_dataset, read_idx, write_idx
from .report import DiversityReport, load_report, report_render
from .run_journal import JournalEventType, RunJournal

__all__ = [
    "ConfigError", "ExperimentConfig", "config_from_dict", "load_config", "save_config",
    "Dataset", "DatasetConfig", "DatasetError", "gen_dataset", "read_idx", "write_idx",
    "DiversityReport", "load_report", "report_render",
    "JournalEventType", "RunJournal",
]
