"""Gray-box virtual flow metering for production chokes."""
