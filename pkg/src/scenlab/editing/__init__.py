"""Sequential editing with per-edit experts and indexing neurons."""
