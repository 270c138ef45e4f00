import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def rows_to_set(array):
    """Canonicalize an (n, 5) fact array as a set of tuples."""
    return {tuple(row) for row in array.tolist()}
