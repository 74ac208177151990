"""HAM sequential recommendation."""
