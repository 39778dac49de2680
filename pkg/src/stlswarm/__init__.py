"""Multi-agent STL planning with a graph planner and a CBF safety filter."""

__version__ = "0.1.0"
