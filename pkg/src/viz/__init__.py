"""Chart rendering for experiment reports."""
