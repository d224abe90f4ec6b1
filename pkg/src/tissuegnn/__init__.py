"""Point-cloud soft-tissue deformation and contact-force prediction.

Subpackages:
    tensor    -- dense tensors with reverse-mode autodiff and Adam
    geometry  -- point clouds, rigid z-rotations, grids, kNN graphs
    phantom   -- binary tissue volumes and profile/condition feature extraction
    datagen   -- procedural indentation oracle and dataset serialization
    model     -- conditional equivariant graph network and checkpointing
    training  -- losses, splits, training loop, evaluation protocols
    service   -- HTTP/WebSocket inference service
    cli       -- command-line entry point
"""

__version__ = "0.1.0"
