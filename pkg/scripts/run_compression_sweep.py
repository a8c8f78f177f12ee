"""Rounds and uploaded bytes to the target AUC at compression ratios 1, 2, 4, 8 and 16."""

from _common import run

if __name__ == "__main__":
    run("compression-sweep", __doc__)
