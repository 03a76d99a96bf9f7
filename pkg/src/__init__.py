# PSMT: src package
