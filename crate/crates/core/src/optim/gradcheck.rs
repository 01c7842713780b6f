// gradient-check suites; filled in with the fusion modules
