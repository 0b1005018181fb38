from __future__ import annotations

import logging
import threading
from pathlib import Path

from src.logger import get_logger, setup_logging


def _flush() -> None:
    for handler in get_logger().handlers:
        handler.flush()


def test_reconfigure_switches_file(tmp_path: Path) -> None:
    first = tmp_path / "one" / "lab.log"
    second = tmp_path / "two" / "lab.log"

    logger = setup_logging(str(first), "debug")
    assert logger.level == logging.DEBUG
    get_logger("trainer").info("to the first file")
    _flush()

    same = setup_logging(str(first), "warning")
    assert same is logger and len(logger.handlers) == 1
    assert logger.level == logging.WARNING

    setup_logging(str(second), "info")
    get_logger("harness").info("to the second file")
    _flush()

    assert "to the first file" in first.read_text(encoding="utf-8")
    text = second.read_text(encoding="utf-8")
    assert "to the second file" in text
    assert "to the first file" not in text
    assert "ratinglab.harness" in text
    assert len(logger.handlers) == 1


def test_lines_carry_thread_name(tmp_path: Path) -> None:
    path = tmp_path / "lab.log"
    setup_logging(str(path), "info")
    worker = threading.Thread(target=lambda: get_logger("harness").info("from a worker"), name="sweep-7")
    worker.start()
    worker.join(timeout=2)
    _flush()
    line = next(line for line in path.read_text(encoding="utf-8").splitlines() if "from a worker" in line)
    assert "(sweep-7)" in line


def test_stream_handler_without_path() -> None:
    logger = setup_logging(None)
    assert len(logger.handlers) == 1
    assert not isinstance(logger.handlers[0], logging.FileHandler)
    assert logger.propagate is False
