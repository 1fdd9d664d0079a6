"""E2e test package."""
