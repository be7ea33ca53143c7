"""repulse test suite."""
