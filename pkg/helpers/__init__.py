"""helpers/ — Workspace-level utility scripts.

Scripts here can be run directly (e.g. ``python helpers/check_config.py``)
or imported by the gcm package as plain Python modules.
"""
