"""Flow migration between Wi-Fi and cellular: traffic analysis, a resuming proxy, and a test harness."""

__version__ = "0.1.0"
