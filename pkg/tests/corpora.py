"""Hand-built candidate/reference corpora for the convention audit."""


def tail_matching_corpus():
    """Candidates get the opening wrong but end on the reference's final phrase.

    Appending " ." to both sides then adds one matched n-gram per sentence at
    every order, and (m + k) / (t + k) > m / t whenever m < t.
    """
    refs = ["am tag scheint die sonne im süden", "morgen regnet es im norden stark",
            "in der nacht wird es kalt und klar", "der wind weht mäßig aus west"]
    cands = ["heute scheint oft die sonne im süden", "später regnet es im norden stark",
             "nachts wird es kalt und klar", "ein wind weht mäßig aus west"]
    return cands, refs


def chinese_corpus():
    refs = ["今天 北方 地区 会 下雨", "明天 南方 天气 晴朗", "周末 气温 明显 下降"]
    cands = ["今天 北部 地区 要 下雨", "明天 南边 天气 晴", "周末 温度 明显 下降"]
    return cands, refs
