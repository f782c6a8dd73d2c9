"""Knowledge-constrained multi-label classifiers: constraints, defense and attacks."""
