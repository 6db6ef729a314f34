"""Hybrid physics/data-driven battery state-of-health estimation."""

__version__ = "0.1.0"
