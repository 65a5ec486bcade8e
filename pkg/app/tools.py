import json
import logging
import os

import numpy as np
import psutil

from app.models import HardwareInfo


def loadEnvVars():
    if "LOG_LEVEL" not in os.environ:
        os.environ["LOG_LEVEL"] = "INFO"

    if "LOGS_PATH" not in os.environ:
        os.environ["LOGS_PATH"] = "./logs/"

    if "RICE_OUTDIR" not in os.environ:
        os.environ["RICE_OUTDIR"] = "./runs/"

    if "RICE_WORKERS" not in os.environ:
        os.environ["RICE_WORKERS"] = "0"

    if "RICE_CACHE_IMAGES" not in os.environ:
        os.environ["RICE_CACHE_IMAGES"] = "20000"


def get_logger(name, level=logging.INFO):
    """To setup as many loggers as you want"""
    logs_path = os.environ.get("LOGS_PATH", "./logs/")
    os.makedirs(logs_path, exist_ok=True)

    logger = logging.getLogger(name)
    logger.setLevel(level)

    target = os.path.abspath(os.path.join(logs_path, name + ".log"))
    for handler in logger.handlers:
        if getattr(handler, "baseFilename", None) == target:
            return logger

    handler = logging.FileHandler(target)
    formatter = logging.Formatter('%(asctime)s %(levelname)s %(message)s')
    handler.setFormatter(formatter)
    logger.addHandler(handler)

    return logger


def hardware_info():
    memory = psutil.virtual_memory()
    return HardwareInfo(
        cpu_count=psutil.cpu_count() or 1,
        cpu_load=psutil.cpu_percent(),
        ram_total_mb=round(memory.total / 1e6, 1),
        ram_usage=memory.percent,
        process_rss_mb=process_rss_mb())


def process_rss_mb():
    return round(psutil.Process().memory_info().rss / 1e6, 1)


def seeded_rng(*seed):
    """PCG64 generator keyed by one or more integers."""
    return np.random.default_rng([int(s) for s in seed])


def to_jsonable(value):
    if isinstance(value, dict):
        return {k: to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(to_jsonable(payload), indent=2, ensure_ascii=False))
        f.write("\n")
