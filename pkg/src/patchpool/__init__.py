"""patchpool: scale issue-resolution by sampling many test/edit pairs and selecting among them."""

__version__ = "0.1.0"
