"""Neural building blocks and the multi-task network."""
