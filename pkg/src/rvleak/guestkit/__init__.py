"""Guest-side tooling: an assembler, an ELF writer and the fixture catalog."""
