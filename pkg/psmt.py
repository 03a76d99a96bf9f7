"""
PSMT — entry script

    python psmt.py <generate|split|train|eval|ablate|plot> [options]

See trainer/cli.py for the subcommands and their flags.
"""

import sys
from pathlib import Path

_ROOT = Path(__file__).resolve().parent
if str(_ROOT) not in sys.path:
    sys.path.insert(0, str(_ROOT))

from trainer.cli import main

if __name__ == "__main__":
    sys.exit(main())
