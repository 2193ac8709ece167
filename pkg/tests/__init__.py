# Prosody Toolkit Test Suite
