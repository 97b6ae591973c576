import json
import sys
import struct
import threading
import zlib
from datetime import datetime, timezone
from pathlib import Path

import pytest
import yaml

from visreason.core import FixedClock, ImageRef
from visreason.gateway import Gateway, mock_from_script
from visreason.orchestrator import PipelineConfig


def png_bytes(width: int = 2, height: int = 2) -> bytes:
    def chunk(kind, data):
        return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", zlib.crc32(kind + data) & 0xFFFFFFFF)

    raw = b"".join(b"\x00" + b"\x80\x80\x80" * width for _ in range(height))
    return (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0))
        + chunk(b"IDAT", zlib.compress(raw))
        + chunk(b"IEND", b"")
    )


@pytest.fixture
def image_path(tmp_path) -> Path:
    p = tmp_path / "scene.png"
    p.write_bytes(png_bytes())
    return p


@pytest.fixture
def image(image_path) -> ImageRef:
    return ImageRef.from_path(image_path)


@pytest.fixture
def clock():
    return FixedClock(datetime(2025, 3, 1, 12, 0, 0, tzinfo=timezone.utc))


@pytest.fixture
def gateway():
    with Gateway(max_in_flight=8, sleep=lambda s: None) as gw:
        yield gw


BACKBONE_SCRIPT = {
    "backend_id": "backbone",
    "replies": {
        "drafter": [
            "1. The image shows an airport with two runways.\n"
            "2. I have not checked for aircraft.\n"
            "3. How many aircraft are parked near the terminal?"
        ],
        "revisor": [
            "Three aircraft are parked near the terminal [1][2].\n\n"
            "Critique: runway count unverified.\n\n"
            "Question: How many runways are visible?\n\n"
            "References:\n- [1] three planes at the terminal\n- [2] several aircraft on the apron",
            "Two runways and three aircraft are visible [1].\n\n"
            "Question: Is there a control tower?\n\n"
            "References:\n- [1] two runways",
            "An airport with two runways, three aircraft and a control tower [1][2].\n\n"
            "Question: What color is the terminal roof?\n\n"
            "References:\n- [1] control tower present\n- [2] tower near the terminal",
        ],
        "spokesman": "FINAL",
        "inquirer": "Ask: How many aircraft are there?",
    },
}


def suite_script(backend_id: str, **extra) -> dict:
    return {
        "backend_id": backend_id,
        "replies": {
            "vision_suite": {
                "by_question": {
                    "How many aircraft are parked near the terminal?": f"{backend_id}: three planes",
                    "How many runways are visible?": f"{backend_id}: two runways",
                    "Is there a control tower?": f"{backend_id}: yes, a tower",
                },
                "default": f"{backend_id}: not sure",
            }
        },
        **extra,
    }


CAPTIONER_SCRIPT = {
    "backend_id": "captioner",
    "replies": {"captioner": "A satellite image of an airport with runways and a terminal."},
}

JUDGE_SCRIPT = {"backend_id": "judge", "replies": {"judge": "1"}}


def write_script(directory: Path, name: str, data: dict) -> Path:
    p = directory / f"{name}.yaml"
    p.write_text(yaml.safe_dump(data, sort_keys=False))
    return p


@pytest.fixture
def scripts(tmp_path):
    d = tmp_path / "scripts"
    d.mkdir()
    return {
        "backbone": write_script(d, "backbone", BACKBONE_SCRIPT),
        "captioner": write_script(d, "captioner", CAPTIONER_SCRIPT),
        "geo": write_script(d, "geo", suite_script("geo")),
        "llava": write_script(d, "llava", suite_script("llava")),
        "gemma": write_script(d, "gemma", suite_script("gemma")),
        "judge": write_script(d, "judge", JUDGE_SCRIPT),
        "dir": d,
    }


def make_pipeline_config(scripts, suite=("geo", "llava"), iterations=3, **kw) -> PipelineConfig:
    return PipelineConfig(
        backbone=mock_from_script(scripts["backbone"]),
        captioner=mock_from_script(scripts["captioner"]),
        suite=tuple(mock_from_script(scripts[s]) for s in suite),
        judge=mock_from_script(scripts["judge"]),
        iterations=iterations,
        **kw,
    )


@pytest.fixture
def pipeline_config(scripts):
    return make_pipeline_config(scripts)


def write_config(directory: Path, scripts: dict, suite=("geo", "llava"), backbone_extra=None, **top) -> Path:
    """A YAML app config wired to the mock scripts in ``scripts``."""
    raw = {
        "pipeline": {
            "backbone": {"script": str(scripts["backbone"]), **(backbone_extra or {})},
            "captioner": {"script": str(scripts["captioner"])},
            "suite": [{"script": str(scripts[s])} for s in suite],
            "judge": {"script": str(scripts["judge"])},
            "iterations": 3,
        },
        "output_dir": "out",
        **top,
    }
    path = directory / "config.yaml"
    path.write_text(yaml.safe_dump(raw, sort_keys=False))
    return path


def eval_project(directory: Path, scripts: dict, types=("obj_quantity", "obj_color"), per_type=3, **top) -> Path:
    """Dataset, judge script and config for a small mock evaluation.

    The judge matches even-numbered questions and rejects odd ones, so
    per-type accuracy is not trivially 0 or 100.
    """
    (directory / "scene.png").write_bytes(png_bytes())
    rows, judge_by_question = [], {}
    for t in types:
        for i in range(per_type):
            q = f"[{t} {i}] What is shown in the scene?"
            rows.append({"id": f"{t}-{i:03d}", "image_path": "scene.png", "question": q, "ground_truth": "airport", "type": t})
            judge_by_question[q] = "1" if i % 2 == 0 else "0"
    dataset = directory / "data.jsonl"
    dataset.write_text("".join(json.dumps(r) + "\n" for r in rows))
    scripts = dict(scripts)
    scripts["judge"] = write_script(
        directory, "graded_judge", {"backend_id": "judge", "replies": {"judge": {"by_question": judge_by_question, "default": "0"}}}
    )
    return write_config(directory, scripts, dataset_path=str(dataset), sample_n=per_type, label="mock", **top)


class StepTimer:
    """Monotonic fake timer that advances one second per read."""

    def __init__(self):
        self.now = 0.0
        self._lock = threading.Lock()

    def __call__(self) -> float:
        with self._lock:
            self.now += 1.0
            return self.now


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
