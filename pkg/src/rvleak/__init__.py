"""rvleak: an RV64 instrumentation engine, memory-trace plugin and leakage analyzer."""

__version__ = "0.1.0"
