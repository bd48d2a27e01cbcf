"""Latency estimation for routing networks on directed line graphs."""
