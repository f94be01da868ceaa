"""Scheduling proxy that multiplexes HTTP requests over a pool of access tokens.

Clients issue unrestricted parallel requests; the pool serializes and paces
them per token so upstream rate limits and concurrency rules are never
violated.
"""

__version__ = "0.1.0"
