# PSMT test suite
