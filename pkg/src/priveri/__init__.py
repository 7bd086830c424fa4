"""Verified LLM inference through privacy-preserving channels."""
