"""Walk-forward backtesting and performance analytics."""
