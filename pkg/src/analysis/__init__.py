"""Statistical experiments, distribution summaries and the verification suite."""
