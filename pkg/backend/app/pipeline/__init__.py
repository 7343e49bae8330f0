"""Volatility estimators, features and benchmark strategies."""
