"""Configuration, persistence, datasets and experiment runners."""
