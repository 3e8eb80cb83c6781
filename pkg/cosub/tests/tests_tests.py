def test_docs():
    import doctest
    import cosub.tests
    r = doctest.testmod(cosub.tests)
    assert r.attempted > 0
    assert r.failed == 0
