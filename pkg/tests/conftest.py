"""Shared fixtures. The desk fixture trains the full default pipeline once per session.

Set TTLVC_DESK_RUN to a directory to keep (and on later sessions reuse) that run.
"""

import json
import os
import time
from pathlib import Path

import pytest
import torch

from ttlvc.config import RunConfig, dumps
from ttlvc.pipeline import PIPELINE, Run, run_pipeline


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    torch.set_num_threads(1)
    keep = os.environ.get("TTLVC_DESK_RUN")
    root = Path(keep) if keep else tmp_path_factory.mktemp("desk")
    cfg = RunConfig()
    done = root / "timings.json"
    if done.exists() and (root / "config.json").read_text() == dumps(cfg):
        return Run(root, cfg), json.loads(done.read_text())
    run = Run(root, cfg)
    t0 = time.process_time()
    times = run_pipeline(run, PIPELINE)
    timings = {"wall": times, "cpu_seconds": time.process_time() - t0}
    done.write_text(json.dumps(timings, indent=1) + "\n")
    return run, timings
