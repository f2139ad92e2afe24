"""Training, evaluation and experiment orchestration."""
