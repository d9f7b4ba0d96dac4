"""Wire format and role state machines for the dedup protocol."""
