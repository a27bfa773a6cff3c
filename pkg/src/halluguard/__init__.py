"""Feedback-controlled, hallucination-resistant scene description."""

__version__ = "0.1.0"
