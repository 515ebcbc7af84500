"""koos test support package."""
