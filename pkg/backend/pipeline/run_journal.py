"""
Run Journal
Append-only JSONL record of pipeline events, one file per run directory.
Each event carries a SHA-256 checksum of its own content so that edited or
truncated journals can be detected afterwards.
"""

import hashlib
import json
import logging
import threading
from dataclasses import asdict, dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

logger = logging.getLogger(__name__)

JOURNAL_NAME = "journal.jsonl"


class JournalEventType(Enum):
    CONFIG_LOADED = "config_loaded"
    STAGE_START = "stage_start"
    STAGE_END = "stage_end"
    STAGE_FAILED = "stage_failed"
    ARTIFACT_WRITTEN = "artifact_written"
    RUN_COMPLETE = "run_complete"


@dataclass
class JournalEvent:
    timestamp: str
    event_type: JournalEventType
    stage: str
    details: Dict[str, Any] = field(default_factory=dict)
    checksum: str = ""

    def __post_init__(self):
        if not self.checksum:
            self.checksum = self.compute_checksum()

    def compute_checksum(self) -> str:
        record = self.to_dict()
        record.pop("checksum", None)
        payload = json.dumps(record, sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()

    def to_dict(self) -> Dict[str, Any]:
        record = asdict(self)
        record["event_type"] = self.event_type.value
        return record

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "JournalEvent":
        data = dict(data)
        data["event_type"] = JournalEventType(data["event_type"])
        return cls(**data)


class RunJournal:
    """Thread-safe journal writer for one run directory"""

    def __init__(self, run_dir: Union[str, Path]):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.path = self.run_dir / JOURNAL_NAME
        self._lock = threading.Lock()

    def log_event(self, event_type: JournalEventType, stage: str = "",
                  details: Optional[Dict[str, Any]] = None) -> JournalEvent:
        event = JournalEvent(timestamp=datetime.now().isoformat(), event_type=event_type,
                             stage=stage, details=details or {})
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as f:
                json.dump(event.to_dict(), f, sort_keys=True, default=str)
                f.write("\n")
        logger.debug(f"JOURNAL: {event_type.value} {stage}")
        return event

    def stage_start(self, stage: str, **details) -> JournalEvent:
        return self.log_event(JournalEventType.STAGE_START, stage, details)

    def stage_end(self, stage: str, **details) -> JournalEvent:
        return self.log_event(JournalEventType.STAGE_END, stage, details)

    def stage_failed(self, stage: str, error: str) -> JournalEvent:
        return self.log_event(JournalEventType.STAGE_FAILED, stage, {"error": error})

    def artifact(self, stage: str, path: Union[str, Path]) -> JournalEvent:
        return self.log_event(JournalEventType.ARTIFACT_WRITTEN, stage, {"path": str(path)})

    def events(self, event_type: Optional[JournalEventType] = None) -> List[JournalEvent]:
        """Readable events in file order; unparseable lines are skipped"""
        events: List[JournalEvent] = []
        if not self.path.exists():
            return events
        with open(self.path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                try:
                    event = JournalEvent.from_dict(json.loads(line))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    continue
                if event_type is None or event.event_type is event_type:
                    events.append(event)
        return events

    def stage_durations(self) -> Dict[str, float]:
        """Seconds between each stage's start and end events"""
        starts: Dict[str, datetime] = {}
        durations: Dict[str, float] = {}
        for event in self.events():
            moment = datetime.fromisoformat(event.timestamp)
            if event.event_type is JournalEventType.STAGE_START:
                starts[event.stage] = moment
            elif event.event_type is JournalEventType.STAGE_END and event.stage in starts:
                durations[event.stage] = (moment - starts[event.stage]).total_seconds()
        return durations

    def verify_integrity(self) -> Dict[str, Any]:
        result = {"valid_entries": 0, "invalid_entries": 0, "integrity_status": "unknown"}
        if not self.path.exists():
            result["integrity_status"] = "good"
            return result
        with open(self.path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                try:
                    data = json.loads(line)
                    expected = data.get("checksum", "")
                    event = JournalEvent.from_dict({**data, "checksum": ""})
                    valid = event.checksum == expected
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    valid = False
                result["valid_entries" if valid else "invalid_entries"] += 1

        total = result["valid_entries"] + result["invalid_entries"]
        if result["invalid_entries"] == 0:
            result["integrity_status"] = "good"
        elif result["invalid_entries"] / max(total, 1) < 0.01:  # Less than 1% corruption
            result["integrity_status"] = "acceptable"
        else:
            result["integrity_status"] = "compromised"
        return result
