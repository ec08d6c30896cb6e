import sys

from prmforge.cli import run

sys.exit(run())
