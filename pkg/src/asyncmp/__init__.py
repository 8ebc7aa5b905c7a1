"""Asynchronous message passing on graphs."""
