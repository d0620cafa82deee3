"""Specification-driven end-to-end testing of LLM-powered agents."""

__version__ = "0.1.0"
