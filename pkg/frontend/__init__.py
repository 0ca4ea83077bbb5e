# Frontend package: command-line handlers
