"""Price bars, universes and synthetic markets."""
