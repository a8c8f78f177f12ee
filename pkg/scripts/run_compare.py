"""Centralized vs plain FedAvg vs attention FedAvg vs the full private, compressed pipeline."""

from _common import run

if __name__ == "__main__":
    run("compare", __doc__)
