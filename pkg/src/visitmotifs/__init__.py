"""Daily visitation networks of places, attributed motif census, and
disruption/recovery metrics for lifestyle patterns."""

__version__ = "0.1.0"
