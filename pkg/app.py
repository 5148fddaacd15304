"""
Main entry point for the multi-task sentence encoder workbench.

    python app.py train --config configs/desk_sp.cfg --out runs/sp
    python app.py gradcheck --config configs/gradcheck.cfg
    python app.py eval-sts --model runs/sp/model.ckpt --pairs sts.tsv

See `modules/cli.py` for every command and its flags.
"""

import sys

from modules.cli import main

if __name__ == "__main__":
    sys.exit(main())
