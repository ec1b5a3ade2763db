"""Split-learning transfer across heterogeneous EEG datasets.

Per-dataset branches feed a shared trunk that is trained on a central
server; classifier heads live either on the server (one unified head) or
on each node (one head per dataset).
"""

__version__ = "0.1.0"
