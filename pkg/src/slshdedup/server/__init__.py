"""Storage-server daemon: accounts, rate limits, blobs, durable state."""
