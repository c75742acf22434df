"""
EquiShape - Main Entry Point

Unsupervised dense correspondence between point clouds with SE(3)-equivariant
local reference frames, trained and run from the command line.

Modules:
    - tensor.py: reverse-mode autodiff on numpy arrays
    - geometry.py: clouds, rigid motions, kNN graphs, frames
    - equinet.py: Cross-GVP network producing frame vectors
    - matcher.py: invariant features, similarity, losses, metrics
    - refine.py: test-time refinement of one pair
    - train.py: optimizer, training loop, checkpoints
    - data.py / storage.py: synthetic pairs and their text formats
    - cli.py: the `equishape` commands
"""
import sys

from cli import main

if __name__ == "__main__":
    sys.exit(main())
