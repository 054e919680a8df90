# Tests for the harness app
