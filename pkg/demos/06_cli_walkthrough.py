"""The command-line workflow end to end, run in a temporary directory.

Equivalent shell session::

    starhit synth --users 8 --days 12 --out data --set L_max=16
    starhit train --data data/dataset.bin --out run --set L_max=16 --set d=8 ...
    starhit eval run/best.ckpt --out run
    starhit inspect run/best.ckpt --sample 0 --out run/trace
"""

import tempfile
from pathlib import Path

from starhit.cli import main

small = ["--set", "L_max=16", "--set", "d=8", "--set", "d_k=16", "--set", "h=2", "--set", "k=2",
         "--set", "epochs=3", "--set", "batch_size=32"]

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    main(["synth", "--users", "8", "--days", "12", "--out", str(tmp / "data"), "--set", "L_max=16"])
    main(["train", "--data", str(tmp / "data" / "dataset.bin"), "--out", str(tmp / "run"), "--grad-check", *small])
    print((tmp / "run" / "history.csv").read_text())
    main(["eval", str(tmp / "run" / "best.ckpt"), "--out", str(tmp / "run")])
    main(["inspect", str(tmp / "run" / "best.ckpt"), "--sample", "0", "--out", str(tmp / "run" / "trace")])
