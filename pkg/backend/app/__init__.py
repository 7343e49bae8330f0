"""MTL-TSMOM backtester."""
