"""Everything that reads or writes files: datasets, prior cache, checkpoints, logs."""
