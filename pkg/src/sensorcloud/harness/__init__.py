"""Multi-process deployments and adversary scenarios."""
