if __name__ == "__main__":
    import dbsmeta.job
    dbsmeta.job.main()
