"""Regenerate the frozen regression fixtures.

Run only when a deliberate numerical change invalidates them:

    python3 tests/fixtures/make_fixtures.py
"""

import json
import os
import shutil
import tempfile

from layout_retouch.backends import ToyBackendSpec, make_toy_pair
from layout_retouch.cli import main
from layout_retouch.core import PipelineConfig
from layout_retouch.fileio import save_ppm
from layout_retouch.pipeline import generate

HERE = os.path.dirname(os.path.abspath(__file__))
PROMPT = "a red <*> on the beach"


def build():
    vanilla, personalized = make_toy_pair(ToyBackendSpec(seed=0))
    _, record = generate(PROMPT, None, vanilla, personalized, PipelineConfig(seed=0))
    with open(os.path.join(HERE, "golden_latents.json"), "w") as fh:
        json.dump({"prompt": PROMPT, "seed": 0, "latent_hashes": record.latent_hashes()},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    layout = os.path.join(HERE, "layout_seed0.ppm")
    save_ppm(record.images["layout"], layout)

    tmp = tempfile.mkdtemp()
    try:
        code = main(["mask-debug", "--prompt", PROMPT, "--layout", layout, "--out", tmp])
        assert code == 0
        dst = os.path.join(HERE, "mask_debug")
        shutil.rmtree(dst, ignore_errors=True)
        shutil.copytree(os.path.join(tmp, "mask-debug-seed0", "masks"), dst)
    finally:
        shutil.rmtree(tmp)


if __name__ == "__main__":
    build()
